"""Regenerates metrics_reference.csv with scikit-image.

Images come from a 64-bit LCG so the Rust tests can rebuild them bit-exactly.
"""
import numpy as np
from skimage.metrics import mean_squared_error, peak_signal_noise_ratio, structural_similarity

MASK = (1 << 64) - 1


def lcg(n, seed):
    out = np.empty(n)
    s = seed
    for i in range(n):
        s = (s * 6364136223846793005 + 1442695040888963407) & MASK
        out[i] = (s >> 11) / float(1 << 53)
    return out


rows = []
for pair in range(20):
    c, h, w = (1, 28, 28) if pair < 16 else (3, 32, 32)
    n = c * h * w
    level = 0.05 * (pair + 1)
    x = lcg(n, 1000 + pair)
    noise = lcg(n, 5000 + pair)
    y = np.clip(x + level * (2.0 * noise - 1.0), 0.0, 1.0)
    xs, ys = x.reshape(c, h, w), y.reshape(c, h, w)
    kw = dict(data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
    if c == 1:
        s = structural_similarity(xs[0], ys[0], **kw)
    else:
        s = structural_similarity(xs, ys, channel_axis=0, **kw)
    m = mean_squared_error(x, y)
    p = peak_signal_noise_ratio(x, y, data_range=1.0)
    rows.append(f"{pair},{c},{h},{w},{level!r},{float(s)!r},{float(p)!r},{float(m)!r}")

with open("metrics_reference.csv", "w") as f:
    f.write("pair,channels,height,width,level,ssim,psnr,mse\n")
    f.write("\n".join(rows) + "\n")
