"""Writes the 4-image IDX fixture and the SHA-256 of its parsed contents.

The checksum is computed with numpy's own big-endian reader, independent of
the Rust parser: pixels as little-endian float64 (byte / 255) followed by the
labels as little-endian uint64.
"""

import hashlib
import pathlib
import struct

import numpy as np

out = pathlib.Path(__file__).resolve().parent.parent / "crates/experiments/tests/fixtures"
out.mkdir(parents=True, exist_ok=True)

rng = np.random.RandomState(20240607)
images = rng.randint(0, 256, size=(4, 28, 28)).astype(np.uint8)
labels = np.array([7, 2, 1, 0], dtype=np.uint8)

(out / "images.idx").write_bytes(struct.pack(">IIII", 0x803, 4, 28, 28) + images.tobytes())
(out / "labels.idx").write_bytes(struct.pack(">II", 0x801, 4) + labels.tobytes())

raw = (out / "images.idx").read_bytes()
magic, n, rows, cols = np.frombuffer(raw[:16], dtype=">u4")
assert magic == 0x803
pixels = np.frombuffer(raw[16:], dtype=np.uint8).reshape(n, rows * cols).astype("<f8") / 255.0
raw_labels = (out / "labels.idx").read_bytes()
assert np.frombuffer(raw_labels[:4], dtype=">u4")[0] == 0x801
parsed_labels = np.frombuffer(raw_labels[8:], dtype=np.uint8).astype("<u8")

digest = hashlib.sha256(pixels.tobytes() + parsed_labels.tobytes()).hexdigest()
(out / "fixture.sha256").write_text(digest + "\n")
print(digest)
