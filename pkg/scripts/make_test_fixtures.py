#!/usr/bin/env python
"""Regenerate the PFM fixtures under tests/fixtures.

Deliberately does not import the package: the files are written with
struct/bytes only, so the reader tests check against an independent
encoding of the same payload in both byte orders.
"""

import pathlib
import struct

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "tests" / "fixtures"

# 5 rows x 7 cols, values chosen to exercise sign, fractions, and exact
# binary fractions (bit-exact on round trip).
ROWS = [
    [0.0, 1.0, -1.0, 0.5, 0.25, -0.75, 100.0],
    [1.5, 2.5, 3.5, 4.5, 5.5, 6.5, 7.5],
    [-0.125, 0.375, 10.625, -42.0, 0.0078125, 65504.0, -3.0],
    [1e-3, 1e3, 1e-6, 1e6, 123.456, -123.456, 0.1],
    [9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0],
]


def write(path: pathlib.Path, scale: float) -> None:
    w, h = len(ROWS[0]), len(ROWS)
    fmt = "<f" if scale < 0 else ">f"
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(f"{scale:.9g}\n".encode())
        for row in reversed(ROWS):  # bottom row first
            for v in row:
                f.write(struct.pack(fmt, v))


def main() -> None:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    write(FIXTURES / "grad_le.pfm", -1.0)
    write(FIXTURES / "grad_be.pfm", 1.0)
    print(f"wrote fixtures to {FIXTURES}")


if __name__ == "__main__":
    main()
