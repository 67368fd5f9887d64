"""PSNR and the append-only metrics CSV."""

from __future__ import annotations

import numpy as np

PSNR_CAP = 99.0
CSV_HEADER = "iter,loss,psnr,seconds,count"


def psnr(a, b):
    """10 log10(1 / MSE) for unit-range images; identical inputs report
    the 99 dB cap. Shapes must match."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


class MetricsLog:
    """Rows of (iter, loss, psnr, seconds, count) serialized with repr-free
    fixed formatting so identical runs produce identical bytes."""

    def __init__(self):
        self.rows = []

    def append(self, iteration, loss, psnr_db, seconds, count):
        self.rows.append((int(iteration), float(loss), float(psnr_db),
                          float(seconds), int(count)))

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for it, loss, p, sec, cnt in self.rows:
            lines.append(f"{it},{loss:.10g},{p:.6f},{sec:.6f},{cnt}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())
