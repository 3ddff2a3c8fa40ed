"""Independent numpy reference for the MFCC pipeline.

Regenerate with: python3 mfcc_reference.py > mfcc_sine440.txt
Input: 0.1 s of 0.5·sin(2π·440·n/16000) at 16 kHz.
Output: one line per frame, 80 cepstral coefficients (no mean subtraction).
"""
import numpy as np

SR, WIN, HOP, NFFT, MELS = 16000, 400, 160, 512, 80

n = np.arange(1600)
x = 0.5 * np.sin(2 * np.pi * 440 * n / SR)
count = (len(x) - WIN) // HOP + 1
frames = np.stack([x[i * HOP : i * HOP + WIN] for i in range(count)]) * np.hamming(WIN)
power = np.abs(np.fft.rfft(frames, NFFT)) ** 2

mel = lambda f: 2595 * np.log10(1 + f / 700)
hz = lambda m: 700 * (10 ** (m / 2595) - 1)
edges = hz(np.linspace(0, mel(SR / 2), MELS + 2))
freqs = np.arange(NFFT // 2 + 1) * SR / NFFT
fb = np.zeros((MELS, len(freqs)))
for m in range(MELS):
    lo, mid, hi = edges[m : m + 3]
    up = (freqs > lo) & (freqs <= mid)
    down = (freqs > mid) & (freqs < hi)
    fb[m, up] = (freqs[up] - lo) / (mid - lo)
    fb[m, down] = (hi - freqs[down]) / (hi - mid)
log_mel = np.log(np.maximum(power @ fb.T, 1e-10))

k = np.arange(MELS)[:, None]
i = np.arange(MELS)[None, :]
dct = np.cos(np.pi * k * (2 * i + 1) / (2 * MELS)) * np.sqrt(2 / MELS)
dct[0] /= np.sqrt(2)
for row in log_mel @ dct.T:
    print(" ".join(f"{v:.17e}" for v in row))
