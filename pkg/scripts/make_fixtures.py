"""Write the built-in bitmaps shipped with the package.

    python scripts/make_fixtures.py

dk_glyph.png  16x16 "DK" monogram used as the trigger logo.
target.png    32x32 checkerboard with an inverted X, the attacker target.
px2x2.png     2x2 grayscale test vector (0, 85, 170, 255) for the PNG loader tests.
"""

from pathlib import Path

import numpy as np
from PIL import Image

ROOT = Path(__file__).resolve().parents[1]
ASSETS = ROOT / "src" / "cnpoison" / "assets"
FIXTURES = ROOT / "tests" / "fixtures"

DK = """
................
................
................
######....##..##
#######...##.##.
##...##...####..
##....##..###...
##....##..###...
##....##..####..
##....##..##.##.
##...##...##..##
#######...##..##
######....##..##
................
................
................
"""


def glyph() -> np.ndarray:
    rows = [r for r in DK.strip().splitlines()]
    rows += ["." * 16] * (16 - len(rows))
    return np.array([[c == "#" for c in r] for r in rows], dtype=np.uint8) * 255


def target(size: int = 32, cell: int = 8) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    checker = ((yy // cell + xx // cell) % 2).astype(float)
    img = 0.15 + 0.7 * checker
    x_mask = (np.abs(yy - xx) <= 1) | (np.abs(yy + xx - (size - 1)) <= 1)
    img[x_mask] = 1.0 - checker[x_mask]
    return np.floor(img * 255 + 0.5).astype(np.uint8)


def main() -> None:
    ASSETS.mkdir(parents=True, exist_ok=True)
    Image.fromarray(glyph()).save(ASSETS / "dk_glyph.png")
    Image.fromarray(target()).save(ASSETS / "target.png")
    FIXTURES.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.array([[0, 85], [170, 255]], dtype=np.uint8)).save(FIXTURES / "px2x2.png")
    print(f"wrote assets to {ASSETS} and test vectors to {FIXTURES}")


if __name__ == "__main__":
    main()
