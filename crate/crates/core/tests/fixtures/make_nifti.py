"""Writes ramp4.nii: a 4x4x4 float32 NIfTI-1 volume holding 0..63 in file
order, pixdim (1, 1, 1). Uses only the standard library."""

import struct
import sys
from pathlib import Path

DIM = 4


def header() -> bytes:
    h = bytearray(348)
    struct.pack_into("<i", h, 0, 348)  # sizeof_hdr
    struct.pack_into("<8h", h, 40, 3, DIM, DIM, DIM, 1, 1, 1, 1)  # dim
    struct.pack_into("<h", h, 70, 16)  # datatype FLOAT32
    struct.pack_into("<h", h, 72, 32)  # bitpix
    struct.pack_into("<8f", h, 76, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)  # pixdim
    struct.pack_into("<f", h, 108, 352.0)  # vox_offset
    struct.pack_into("<f", h, 112, 1.0)  # scl_slope
    struct.pack_into("<B", h, 123, 10)  # xyzt_units: mm, s
    h[344:348] = b"n+1\0"
    return bytes(h)


def main() -> None:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).with_name("ramp4.nii")
    body = struct.pack(f"<{DIM ** 3}f", *range(DIM ** 3))
    out.write_bytes(header() + b"\0" * 4 + body)


if __name__ == "__main__":
    main()
