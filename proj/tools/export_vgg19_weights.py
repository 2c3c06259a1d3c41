#!/usr/bin/env python3
"""Convert torchvision VGG-19 weights into the gst backbone weights file.

    python3 tools/export_vgg19_weights.py vgg19.pth vgg19.gstw
    python3 tools/export_vgg19_weights.py --download vgg19.gstw

The input is a torchvision ``vgg19`` state dict (ImageNet weights expect
inputs normalized with the ImageNet mean and std, which the library applies).
Only the 16 convolution layers of ``features`` are exported.
"""

import argparse
import struct
import sys

import numpy as np

MAGIC = b"GSTVGG19"
VERSION = 1
SHAPES = [(3, 64), (64, 64), (64, 128), (128, 128), (128, 256)] + [(256, 256)] * 3 + [(256, 512)] + [(512, 512)] * 7


def conv_tensors(state):
    keys = sorted({k.rsplit(".", 1)[0] for k in state if k.startswith("features.") and k.endswith(".weight")},
                  key=lambda k: int(k.split(".")[1]))
    if len(keys) != len(SHAPES):
        sys.exit(f"expected {len(SHAPES)} convolution layers under features.*, found {len(keys)}")
    for key, (cin, cout) in zip(keys, SHAPES):
        w = np.asarray(state[key + ".weight"], dtype=np.float32)
        b = np.asarray(state[key + ".bias"], dtype=np.float32)
        if w.shape != (cout, cin, 3, 3) or b.shape != (cout,):
            sys.exit(f"{key}: shape {w.shape} does not match VGG-19 ({cout}, {cin}, 3, 3)")
        yield w, b


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("source", nargs="?", help="torchvision vgg19 state dict (.pth)")
    ap.add_argument("output")
    ap.add_argument("--download", action="store_true", help="fetch the torchvision ImageNet weights instead")
    args = ap.parse_args()

    import torch

    if args.download:
        import torchvision
        state = torchvision.models.vgg19(weights=torchvision.models.VGG19_Weights.IMAGENET1K_V1).state_dict()
    elif args.source:
        state = torch.load(args.source, map_location="cpu")
    else:
        ap.error("give a source state dict or --download")
    state = {k: v.numpy() for k, v in state.items()}

    with open(args.output, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(SHAPES)))
        for w, b in conv_tensors(state):
            f.write(struct.pack("<III", w.shape[0], w.shape[1], 3))
            f.write(np.ascontiguousarray(w).tobytes())
            f.write(b.tobytes())
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
