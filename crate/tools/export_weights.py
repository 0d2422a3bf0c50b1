#!/usr/bin/env python3
"""Export torchvision ImageNet weights into the hybridct container format.

Writes one ``<backbone>.hctw`` file per architecture (vgg16, densenet121,
mobilenetv2) containing the convolutional trunk's tensors under their
``state_dict`` names, in the checksummed binary layout the Rust crate reads.

Usage:
    python tools/export_weights.py --out ~/.cache/hybridct-weights
    export HYBRIDCT_WEIGHTS_DIR=~/.cache/hybridct-weights

Requires torch + torchvision with download access to the pretrained weights.
"""

import argparse
import hashlib
import pathlib
import struct

MAGIC = b"HCTW1\x00"


def write_container(path: pathlib.Path, tensors: dict) -> None:
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().float().contiguous()
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded))
        body += encoded
        body += bytes([0])  # dtype f32
        shape = list(tensor.shape) or [1]
        body += bytes([len(shape)])
        for dim in shape:
            body += struct.pack("<I", dim)
        body += tensor.numpy().astype("<f4").tobytes()
    body += hashlib.sha256(body).digest()
    path.write_bytes(body)
    print(f"wrote {path} ({len(tensors)} tensors, {len(body) / 1e6:.1f} MB)")


def trunk_state(model, prefix: str = "features") -> dict:
    out = {}
    for name, tensor in model.state_dict().items():
        if not name.startswith(prefix + "."):
            continue
        if name.endswith("num_batches_tracked"):
            continue
        out[name] = tensor
    return out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args()
    out = pathlib.Path(args.out).expanduser()
    out.mkdir(parents=True, exist_ok=True)

    from torchvision import models

    exports = {
        "vgg16": models.vgg16(weights=models.VGG16_Weights.IMAGENET1K_V1),
        "densenet121": models.densenet121(weights=models.DenseNet121_Weights.IMAGENET1K_V1),
        "mobilenetv2": models.mobilenet_v2(weights=models.MobileNet_V2_Weights.IMAGENET1K_V1),
    }
    for name, model in exports.items():
        model.eval()
        write_container(out / f"{name}.hctw", trunk_state(model))


if __name__ == "__main__":
    main()
