"""First-order optimizers operating in place on a dict of float64 arrays."""

import numpy as np

from ..errors import ConfigurationError


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for name in sorted(grads):
            params[name] -= self.lr * grads[name]


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= lr_t * m / (np.sqrt(v) + self.eps)


class RMSprop:
    def __init__(self, lr, rho=0.9, eps=1e-7):
        self.lr, self.rho, self.eps = lr, rho, eps
        self.acc = {}

    def step(self, params, grads):
        for name in sorted(grads):
            g = grads[name]
            a = self.acc.get(name)
            if a is None:
                a = self.acc[name] = np.zeros_like(g)
            a *= self.rho
            a += (1.0 - self.rho) * g * g
            params[name] -= self.lr * g / (np.sqrt(a) + self.eps)


OPTIMIZERS = {"sgd": SGD, "adam": Adam, "rmsprop": RMSprop}


def make_optimizer(kind, lr):
    try:
        return OPTIMIZERS[kind](lr)
    except KeyError:
        raise ConfigurationError(f"unknown optimizer {kind!r}") from None
