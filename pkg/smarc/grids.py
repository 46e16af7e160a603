from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

GAP_PX = 4


def _to_pil(arr: np.ndarray) -> Image.Image:
    a = np.round(np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    return Image.fromarray(a)


def triptych(masked: np.ndarray, recon: np.ndarray, target: np.ndarray) -> Image.Image:
    """masked input | reconstruction | target, side by side on white."""
    panels = [_to_pil(x) for x in (masked, recon, target)]
    w, h = panels[0].size
    sheet = Image.new("RGB", (3 * w + 2 * GAP_PX, h), (255, 255, 255))
    for i, im in enumerate(panels):
        sheet.paste(im, (i * (w + GAP_PX), 0))
    return sheet


def save_triptychs(
    out_dir: str | Path,
    masked: Sequence[np.ndarray],
    recon: Sequence[np.ndarray],
    target: Sequence[np.ndarray],
    names: Optional[Sequence[str]] = None,
) -> List[Path]:
    """Write one PNG per sample, sorted-stable file names triptych_000.png ..."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (m, r, t) in enumerate(zip(masked, recon, target)):
        stem = f"triptych_{i:03d}"
        if names is not None:
            stem += "_" + Path(str(names[i])).stem
        p = out / f"{stem}.png"
        triptych(m, r, t).save(p)
        paths.append(p)
    return paths
