"""Converts torchvision VGG-19 weights into a styleflow encoder file.

Only the layers up to relu4_1 are kept. The output embeds the manifest and
checksum that `load_encoder` verifies.

    python3 scripts/convert_vgg19.py vgg19.safetensors
    python3 scripts/convert_vgg19.py vgg19.safetensors --state-dict vgg19-dcbb9e9d.pth
"""
import argparse
import hashlib
import json
import struct

import numpy as np
import torch
from safetensors.numpy import save_file

LAYERS = [0, 2, 5, 7, 10, 12, 14, 16, 19]
IMAGENET_MEAN = [0.485, 0.456, 0.406]
IMAGENET_STD = [0.229, 0.224, 0.225]


def load_state_dict(path):
    if path is not None:
        return torch.load(path, map_location="cpu")
    from torchvision.models import VGG19_Weights, vgg19

    return vgg19(weights=VGG19_Weights.IMAGENET1K_V1).state_dict()


def digest(tensors):
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        h.update(name.encode())
        for d in t.shape:
            h.update(struct.pack("<Q", d))
        h.update(t.astype("<f4").tobytes())
    return h.hexdigest()


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("output")
    parser.add_argument("--state-dict", help="torchvision vgg19 state dict (.pth); downloaded when omitted")
    args = parser.parse_args()

    state = load_state_dict(args.state_dict)
    tensors = {}
    for i in LAYERS:
        for part in ("weight", "bias"):
            name = f"features.{i}.{part}"
            tensors[name] = np.ascontiguousarray(state[name].detach().cpu().numpy().astype(np.float32))
    manifest = {
        "format": "styleflow-encoder/1",
        "variant": "vgg19-relu4_1",
        "preprocess": {"mean": IMAGENET_MEAN, "std": IMAGENET_STD},
        "tensors": {n: list(t.shape) for n, t in sorted(tensors.items())},
        "checksum": digest(tensors),
    }
    save_file(tensors, args.output, metadata={"styleflow": json.dumps(manifest)})
    print(f"wrote {args.output} (checksum {manifest['checksum']})")


if __name__ == "__main__":
    main()
