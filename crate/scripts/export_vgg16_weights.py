#!/usr/bin/env python3
"""Export the VGG16 ImageNet convolutional base into the tensor container
consumed by the `vgg16_pretrained` encoder (model.pretrained_weights).

Requires tensorflow/keras with network access to download the weights once:

    python3 scripts/export_vgg16_weights.py vgg16_imagenet.bin

The container is little-endian: magic "CTW1", u32 tensor count, then per
tensor u16 name length, name bytes, u8 ndim, u32 dims, f64 values. Conv
weights are stored GEMM-ready as (out_channels, in_channels * kh * kw) with
rows ordered channel-major (ci * k * k + ky * k + kx), matching the im2col
layout. The encoder applies caffe-style preprocessing (BGR, mean
subtraction), which is what these weights were trained with.
"""

import struct
import sys

import numpy as np


# Layer indices of the conv layers inside the encoder stack
# (pool layers occupy the gaps): block1..block5.
CONV_LAYER_INDICES = [0, 1, 3, 4, 6, 7, 8, 10, 11, 12, 14, 15, 16]


def write_container(path, tensors):
    with open(path, "wb") as f:
        f.write(b"CTW1")
        f.write(struct.pack("<I", len(tensors)))
        for name, array in tensors:
            data = np.ascontiguousarray(array, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                f.write(struct.pack("<I", dim))
            f.write(data.tobytes())


def main():
    if len(sys.argv) != 2:
        sys.exit(f"usage: {sys.argv[0]} <output.bin>")
    out_path = sys.argv[1]

    from tensorflow.keras.applications import VGG16

    base = VGG16(include_top=False, weights="imagenet")
    conv_layers = [l for l in base.layers if "conv" in l.name]
    assert len(conv_layers) == len(CONV_LAYER_INDICES), (
        f"expected {len(CONV_LAYER_INDICES)} conv layers, got {len(conv_layers)}"
    )

    tensors = []
    for idx, layer in zip(CONV_LAYER_INDICES, conv_layers):
        kernel, bias = layer.get_weights()  # kernel: (kh, kw, in_c, out_c)
        kh, kw, in_c, out_c = kernel.shape
        gemm = np.transpose(kernel, (3, 2, 0, 1)).reshape(out_c, in_c * kh * kw)
        tensors.append((f"encoder.conv{idx}.weight", gemm))
        tensors.append((f"encoder.conv{idx}.bias", bias))
        print(f"encoder.conv{idx}: {layer.name} {kernel.shape} -> {gemm.shape}")

    write_container(out_path, tensors)
    print(f"wrote {len(tensors)} tensors to {out_path}")


if __name__ == "__main__":
    main()
