"""Export the published VGG19 conv weights up to conv3_4 as a TDLW file.

The weights come from the torchvision pretrained-model distribution (or a
local state-dict file).  Output tensors are (out, in, kh, kw) row-major
float32 little-endian, named convB_L.weight / convB_L.bias, with a
manifest listing name, shape, and a per-tensor checksum.  On any failure
nothing is written.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import struct
import sys
import tempfile
from collections import OrderedDict

import numpy as np

MAGIC = b"TDLW"
FORMAT_VERSION = 1
DTYPE_F32 = 0

# (block, layers, channels) for the exported prefix of the VGG19 features
BLOCKS = ((1, 2, 64), (2, 2, 128), (3, 4, 256))

# indices of the conv layers inside torchvision's vgg19().features
TORCHVISION_CONV_INDICES = (0, 2, 5, 7, 10, 12, 14, 16)


class ExportError(RuntimeError):
    pass


def expected_topology():
    shapes = OrderedDict()
    in_ch = 3
    for block, layers, ch in BLOCKS:
        for layer in range(1, layers + 1):
            shapes[f"conv{block}_{layer}.weight"] = (ch, in_ch, 3, 3)
            shapes[f"conv{block}_{layer}.bias"] = (ch,)
            in_ch = ch
    return shapes


def serialize_tdlw(tensors) -> bytes:
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION),
           struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def collect_from_state_dict(state_dict):
    """Map torchvision feature indices to convB_L names, checking shapes."""
    expected = expected_topology()
    tensors = OrderedDict()
    names = list(expected)
    for i, idx in enumerate(TORCHVISION_CONV_INDICES):
        for suffix, j in (("weight", 2 * i), ("bias", 2 * i + 1)):
            key = f"features.{idx}.{suffix}"
            if key not in state_dict:
                raise ExportError(f"state dict is missing {key!r}")
            arr = np.asarray(state_dict[key].detach().cpu().numpy()
                             if hasattr(state_dict[key], "detach")
                             else state_dict[key], dtype=np.float32)
            name = names[j]
            if arr.shape != expected[name]:
                raise ExportError(
                    f"{key!r} has shape {arr.shape}, expected "
                    f"{expected[name]} for {name}")
            tensors[name] = arr
    return tensors


def load_pretrained_state_dict(weights_file=None):
    if weights_file is not None:
        if not os.path.exists(weights_file):
            raise ExportError(f"weights file not found: {weights_file}")
        import torch
        return torch.load(weights_file, map_location="cpu",
                          weights_only=True)
    try:
        from torchvision.models import VGG19_Weights, vgg19
        model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
    except Exception as exc:
        raise ExportError(f"could not obtain pretrained weights: {exc}")
    return model.state_dict()


def write_manifest(path, tensors, content_checksum):
    lines = [f"{name}\t{'x'.join(str(e) for e in arr.shape)}\t"
             f"{hashlib.sha256(np.ascontiguousarray(arr, dtype='<f4').tobytes()).hexdigest()}"
             for name, arr in tensors.items()]
    lines.append(f"#content\tsha256\t{content_checksum}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def export(out_path, weights_file=None):
    """Write <out_path> (TDLW) and <out_path>.manifest.txt atomically."""
    state_dict = load_pretrained_state_dict(weights_file)
    tensors = collect_from_state_dict(state_dict)
    blob = serialize_tdlw(tensors)
    checksum = hashlib.sha256(blob).hexdigest()

    out_dir = os.path.dirname(os.path.abspath(out_path)) or "."
    os.makedirs(out_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, out_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    write_manifest(str(out_path) + ".manifest.txt", tensors, checksum)
    return checksum


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="vgg-export",
        description="Export pretrained VGG19 conv1_1..conv3_4 to TDLW")
    parser.add_argument("--out", required=True, help="output TDLW path")
    parser.add_argument("--weights-file",
                        help="local VGG19 state-dict (.pth) instead of the "
                             "torchvision download/cache")
    args = parser.parse_args(argv)
    try:
        checksum = export(args.out, weights_file=args.weights_file)
    except ExportError as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out} (sha256 {checksum})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
