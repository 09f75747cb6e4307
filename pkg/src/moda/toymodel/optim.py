"""AdamW with decoupled weight decay and a warmup + cosine learning-rate
schedule."""
import math

import numpy as np


def cosine_lr(step, total, base_lr, warmup=0.03):
    """Learning rate for 0-based ``step`` of ``total``."""
    warm = math.ceil(warmup * total)
    if step < warm:
        return base_lr * (step + 1) / warm
    span = max(1, total - warm)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


class AdamW:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01,
                 no_decay=lambda name: ".mask." in name):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = no_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        """Update ``params`` in place."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and not self.no_decay(k):
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
