"""Render the bundled 32x32 glyph images (8-bit binary PGM) used as 2D target densities."""
import pathlib
import sys

from PIL import Image, ImageDraw, ImageFont

FONT = "/usr/share/fonts/truetype/dejavu/DejaVuSans-Bold.ttf"
SIZE = 32


def render(ch: str) -> Image.Image:
    big = 8 * SIZE
    img = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(img)
    font = ImageFont.truetype(FONT, int(big * 0.8))
    left, top, right, bottom = draw.textbbox((0, 0), ch, font=font)
    draw.text(((big - (right - left)) / 2 - left, (big - (bottom - top)) / 2 - top), ch, fill=255, font=font)
    return img.resize((SIZE, SIZE), Image.LANCZOS)


def main(out_dir: str) -> None:
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for ch in "ASR8":
        render(ch).save(out / f"glyph_{ch}.pgm")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/glyphs")
