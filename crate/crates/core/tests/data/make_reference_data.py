"""Regenerates the reference data used by the core integration tests.

Everything here is computed with PyTorch, NumPy and scikit-image, sharing no
code with the Rust crate:

* network_reference.ckpt / network_reference.json: a compact network with
  seeded random weights, written in the crate's checkpoint layout, plus
  float64 PyTorch outputs of the inference path, the full forward pass and the
  discriminator.
* ssim_reference.json: scikit-image SSIM / PSNR for seeded 8-bit image pairs.

Run from this directory: python3 make_reference_data.py
"""

import json
import struct

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

torch.set_default_dtype(torch.float64)

NETWORK = {
    "patch": 64,
    "encoder_channels": [4, 6, 8, 8, 8],
    "composition_channels": [5],
    "discriminator_channels": [4, 4, 8, 8],
}
DILATION = 2
LEAKY = 0.2


def layer_table(cfg):
    """(name, in, out, kernel, stride, pad, dilation) for every layer."""
    e = cfg["encoder_channels"]
    layers = []
    cin = 3
    for m in range(5):
        d = DILATION if m == 0 else 1
        layers.append((f"enc{m + 1}.conv_a", cin, e[m], 3, 1, d, d))
        layers.append((f"enc{m + 1}.conv_b", e[m], e[m], 3, 1, d, d))
        cin = e[m]
    dec = [e[3], e[2], e[1], e[0], e[0]]
    cin = e[4]
    for j in range(5):
        layers.append((f"dec_b{j + 1}.conv", cin, dec[j], 3, 1, 1, 1))
        cin = dec[j]
    layers.append(("dec_b.head", cin, 3, 3, 1, 1, 1))
    cin = e[4]
    for j in range(5):
        layers.append((f"dec_r{j + 1}.conv", cin + dec[j], dec[j], 3, 1, 1, 1))
        cin = dec[j]
    layers.append(("dec_r.head", cin, 3, 3, 1, 1, 1))
    cin = 6
    for i, c in enumerate(cfg["composition_channels"]):
        layers.append((f"comp.conv{i + 1}", cin, c, 3, 1, 1, 1))
        cin = c
    layers.append(("comp.head", cin, 3, 3, 1, 1, 1))
    cin = 3
    for i, (c, s) in enumerate(zip(cfg["discriminator_channels"] + [1], [2, 2, 2, 1, 1])):
        layers.append((f"disc.conv{i + 1}", cin, c, 4, s, 1, 1))
        cin = c
    return layers


class Reference:
    def __init__(self, cfg, rng):
        self.spec = {l[0]: l for l in layer_table(cfg)}
        self.params = {}
        for name, cin, cout, k, *_ in self.spec.values():
            bound = np.sqrt(3.0 / (cin * k * k))
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
            b = rng.uniform(-0.1, 0.1, size=(cout,)).astype(np.float32)
            self.params[name] = (w, b)

    def conv(self, x, name, act, skip=None):
        _, _, _, _, stride, pad, dil = self.spec[name]
        w, b = self.params[name]
        y = F.conv2d(x, torch.from_numpy(w.astype(np.float64)), torch.from_numpy(b.astype(np.float64)),
                     stride=stride, padding=pad, dilation=dil)
        if skip is not None:
            y = y + skip
        return {"relu": F.relu, "sigmoid": torch.sigmoid, "leaky": lambda t: F.leaky_relu(t, LEAKY)}[act](y)

    def encoder(self, x):
        levels, stem = [], None
        for m in range(1, 6):
            h = self.conv(x, f"enc{m}.conv_a", "relu")
            y = self.conv(h, f"enc{m}.conv_b", "relu", skip=h)
            if m == 1:
                stem = y
            x = F.max_pool2d(y, 2)
            levels.append(x)
        return levels, stem

    @staticmethod
    def skip(levels, stem, j):
        return levels[3 - j] if j < 4 else stem

    def background(self, levels, stem):
        cur, feats = levels[4], []
        for j in range(5):
            up = F.interpolate(cur, scale_factor=2, mode="nearest")
            cur = self.conv(up, f"dec_b{j + 1}.conv", "relu", skip=self.skip(levels, stem, j))
            feats.append(cur)
        return self.conv(cur, "dec_b.head", "sigmoid"), feats

    def rain(self, levels, stem, feats):
        cur = levels[4]
        for j in range(5):
            up = F.interpolate(cur, scale_factor=2, mode="nearest")
            cur = self.conv(torch.cat([up, feats[j]], 1), f"dec_r{j + 1}.conv", "relu",
                            skip=self.skip(levels, stem, j))
        return self.conv(cur, "dec_r.head", "sigmoid")

    def compose(self, b, r):
        cur = torch.cat([b, r], 1)
        n = len(NETWORK["composition_channels"])
        for i in range(n):
            cur = self.conv(cur, f"comp.conv{i + 1}", "relu")
        return self.conv(cur, "comp.head", "sigmoid")

    def discriminate(self, x):
        for i in range(1, 5):
            x = self.conv(x, f"disc.conv{i}", "leaky")
        return self.conv(x, "disc.conv5", "sigmoid")

    def derain(self, img):
        h, w, _ = img.shape
        ph, pw = -(-h // 32) * 32, -(-w // 32) * 32
        padded = np.pad(img, ((0, ph - h), (0, pw - w), (0, 0)), mode="reflect")
        x = torch.from_numpy(padded.transpose(2, 0, 1)[None].copy())
        levels, stem = self.encoder(x)
        b, _ = self.background(levels, stem)
        return b[0, :, :h, :w].numpy().transpose(1, 2, 0)

    def forward_full(self, img):
        x = torch.from_numpy(img.transpose(2, 0, 1)[None].copy())
        levels, stem = self.encoder(x)
        b, feats = self.background(levels, stem)
        r = self.rain(levels, stem, feats)
        o = self.compose(b, r)
        return [t[0].numpy().transpose(1, 2, 0) for t in (b, r, o)]

    def write_checkpoint(self, path):
        names = sorted(self.params)
        tensors = [
            {"group": "weights", "layer": n, "weight_shape": list(self.params[n][0].shape),
             "bias_len": int(self.params[n][1].shape[0])}
            for n in names
        ]
        header = json.dumps({"network": NETWORK, "tensors": tensors, "state": None}).encode()
        with open(path, "wb") as f:
            f.write(b"RSCK")
            f.write(struct.pack("<IQ", 1, len(header)))
            f.write(header)
            for n in names:
                w, b = self.params[n]
                f.write(w.astype("<f4").tobytes())
                f.write(b.astype("<f4").tobytes())


def save_png(path, rng, h, w):
    pixels = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    Image.fromarray(pixels, "RGB").save(path)
    return pixels.astype(np.float64) / 255.0


def flat(a):
    return [float(v) for v in np.asarray(a, dtype=np.float64).ravel()]


def network_reference():
    rng = np.random.default_rng(20240)
    net = Reference(NETWORK, rng)
    net.write_checkpoint("network_reference.ckpt")
    odd = save_png("network_input_odd.png", rng, 50, 70)
    square = save_png("network_input_square.png", rng, 64, 64)
    b, r, o = net.forward_full(square)
    d = net.discriminate(torch.from_numpy(square.transpose(2, 0, 1)[None].copy()))[0, 0].numpy()
    out = {
        "derain_odd": {"shape": list(odd.shape), "values": flat(net.derain(odd))},
        "background": {"shape": list(b.shape), "values": flat(b)},
        "rain": {"shape": list(r.shape), "values": flat(r)},
        "recomposed": {"shape": list(o.shape), "values": flat(o)},
        "discriminator": {"shape": list(d.shape), "values": flat(d)},
    }
    with open("network_reference.json", "w") as f:
        json.dump(out, f)


def ssim_reference():
    rng = np.random.default_rng(7)
    cases = []
    for i in range(6):
        h, w = int(rng.integers(11, 40)), int(rng.integers(11, 40))
        x = save_png(f"ssim_x{i}.png", rng, h, w)
        if i % 2:
            noisy = np.clip(x * 255 + rng.normal(0, 12, size=x.shape), 0, 255).round().astype(np.uint8)
            Image.fromarray(noisy, "RGB").save(f"ssim_y{i}.png")
            y = noisy.astype(np.float64) / 255.0
        else:
            y = save_png(f"ssim_y{i}.png", rng, h, w)
        s = structural_similarity(x, y, channel_axis=2, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                  use_sample_covariance=False, K1=0.01, K2=0.03)
        p = peak_signal_noise_ratio(x, y, data_range=1.0)
        cases.append({"x": f"ssim_x{i}.png", "y": f"ssim_y{i}.png", "ssim": float(s), "psnr": float(p)})
    const = structural_similarity(np.zeros((16, 16)), np.ones((16, 16)), data_range=1.0, gaussian_weights=True,
                                  sigma=1.5, use_sample_covariance=False)
    with open("ssim_reference.json", "w") as f:
        json.dump({"cases": cases, "constant_zero_vs_one": float(const)}, f, indent=1)


if __name__ == "__main__":
    network_reference()
    ssim_reference()
