"""Attention inspection: CSV dumps of the averaged maps and pad-column mass statistics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import GroundingSample, in_segment_mask
from .model import IANet


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    """Row-major CSV with six-decimal fixed-point values."""
    np.savetxt(path, np.asarray(matrix, dtype=np.float64), fmt="%.6f", delimiter=",")


def dump_attention(net: IANet, sample: GroundingSample, out_dir) -> list[Path]:
    """Write every block's inter and intra maps for one sample; return the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trunk = net.trunk(sample.video, sample.query, inspect=True)
    written = []
    for i, dump in enumerate(trunk.dumps):
        maps = {
            "inter_A_V": dump.inter.A_V.data,
            "inter_A_Q": dump.inter.A_Q.data,
            "intra_video": dump.intra_video.data,
            "intra_query": dump.intra_query.data,
        }
        for tag, m in maps.items():
            path = out / f"{sample.sample_id}.block{i}.{tag}.csv"
            write_matrix_csv(path, m)
            written.append(path)
    return written


def pad_mass(A_V: np.ndarray, T: int, N: int) -> np.ndarray:
    """Attention mass each real clip row puts on the pad columns, shape [T]."""
    return A_V[:T, N:].sum(axis=1)


@dataclass
class PadMassReport:
    in_segment: float      # mean pad mass over in-segment clips
    out_segment: float     # mean pad mass over out-of-segment clips (distractor clips included)
    per_block_in: list[float]
    per_block_out: list[float]
    n_in: int
    n_out: int

    @property
    def ordered(self) -> bool:
        return self.out_segment > self.in_segment


def pad_mass_report(net: IANet, samples: Sequence[GroundingSample]) -> PadMassReport:
    """Average pad mass of in- vs out-of-segment clips, pooled over clips and blocks."""
    L = net.config.L
    ins = [[] for _ in range(L)]
    outs = [[] for _ in range(L)]
    for s in samples:
        trunk = net.trunk(s.video, s.query, inspect=True)
        mask = in_segment_mask(s)
        for b, dump in enumerate(trunk.dumps):
            mass = pad_mass(dump.inter.A_V.data, s.T, s.query.shape[0])
            ins[b].append(mass[mask])
            outs[b].append(mass[~mask])
    per_in = [float(np.concatenate(x).mean()) if x else float("nan") for x in ins]
    per_out = [float(np.concatenate(x).mean()) if x else float("nan") for x in outs]
    return PadMassReport(
        in_segment=float(np.mean(per_in)) if per_in else float("nan"),
        out_segment=float(np.mean(per_out)) if per_out else float("nan"),
        per_block_in=per_in,
        per_block_out=per_out,
        n_in=sum(x.size for x in ins[0]) if L else 0,
        n_out=sum(x.size for x in outs[0]) if L else 0,
    )
