"""Dense tanh networks with hand-rolled reverse-mode gradients.

Implements exactly what the learning stack needs: batched forward
values, Jacobians with respect to the input, parameter gradients of
batch losses, and parameter gradients of directional input-gradient
functionals sum_b v_b . grad_x y(x_b).  The last one is the
double-backprop pass behind Hamiltonian-style training, realized as a
forward (tangent) sweep in the direction v followed by reverse mode
through the combined computation.

Layers are stored row-major as W (out, in) plus bias (out,); samples
are rows.  Hidden activations are tanh, the output layer is linear.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import ConfigurationError

Array = np.ndarray


class MLP:
    def __init__(self, widths: Sequence[int], rng: np.random.Generator | None = None):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ConfigurationError(f"bad layer widths {widths}")
        self.widths = widths
        rng = rng or np.random.default_rng(0)
        self.Ws: List[Array] = []
        self.bs: List[Array] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            self.Ws.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
            self.bs.append(np.zeros(fan_out))

    @property
    def d_in(self) -> int:
        return self.widths[0]

    @property
    def d_out(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.Ws)

    # -- forward ---------------------------------------------------------

    def _forward(self, X: Array):
        """Activations A[0..L]; hidden layers tanh, last layer linear."""
        A = [X]
        for l in range(self.n_layers):
            Z = A[-1] @ self.Ws[l].T + self.bs[l]
            A.append(np.tanh(Z) if l < self.n_layers - 1 else Z)
        return A

    def value(self, X) -> Array:
        X = self._as_batch(X)
        return self._forward(X)[-1]

    def _as_batch(self, X) -> Array:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[-1] != self.d_in:
            raise ConfigurationError(
                f"input has {X.shape[-1]} features, network expects {self.d_in}"
            )
        return X

    # -- first-order reverse mode ----------------------------------------

    def input_grad(self, X) -> Array:
        """Batch gradient of the scalar output w.r.t. the input, (B, d_in)."""
        if self.d_out != 1:
            raise ConfigurationError("input_grad is defined for scalar-output networks")
        X = self._as_batch(X)
        A = self._forward(X)
        G = np.ones((X.shape[0], 1)) @ self.Ws[-1]
        for l in range(self.n_layers - 2, -1, -1):
            G = (G * (1.0 - A[l + 1] ** 2)) @ self.Ws[l]
        return G

    def input_jacobian(self, x) -> Array:
        """Full (d_out, d_in) Jacobian at a single input."""
        x = np.asarray(x, dtype=float).reshape(1, self.d_in)
        A = self._forward(x)
        rows = []
        for r in range(self.d_out):
            G = self.Ws[-1][r : r + 1, :].copy()
            for l in range(self.n_layers - 2, -1, -1):
                G = (G * (1.0 - A[l + 1] ** 2)) @ self.Ws[l]
            rows.append(G[0])
        return np.stack(rows)

    def grads_value(self, X, GY):
        """Parameter gradients of sum_b GY_b . y(x_b); returns [(dW, db)]."""
        X = self._as_batch(X)
        GY = np.asarray(GY, dtype=float).reshape(X.shape[0], self.d_out)
        A = self._forward(X)
        grads = [None] * self.n_layers
        S = GY
        for l in range(self.n_layers - 1, -1, -1):
            grads[l] = (S.T @ A[l], S.sum(axis=0))
            if l > 0:
                S = (S @ self.Ws[l]) * (1.0 - A[l] ** 2)
        return grads

    # -- double backprop ---------------------------------------------------

    def grads_directional(self, X, V):
        """Parameter gradients of phi = sum_b V_b . grad_x y(x_b).

        Forward tangent pass in the per-sample direction V (the
        Jacobian-vector product of the scalar network), then reverse
        mode through the combined primal+tangent computation.
        """
        if self.d_out != 1:
            raise ConfigurationError("grads_directional is defined for scalar-output networks")
        X = self._as_batch(X)
        V = np.asarray(V, dtype=float).reshape(X.shape)
        L = self.n_layers
        A = [X]
        Ad = [V]
        Zd = [None]
        for l in range(L):
            Z = A[-1] @ self.Ws[l].T + self.bs[l]
            Zdl = Ad[-1] @ self.Ws[l].T
            if l < L - 1:
                Al = np.tanh(Z)
                A.append(Al)
                Ad.append((1.0 - Al**2) * Zdl)
            else:
                A.append(Z)
                Ad.append(Zdl)
            Zd.append(Zdl)
        B = X.shape[0]
        lam_zd = np.ones((B, 1))
        lam_z = np.zeros((B, 1))
        grads = [None] * L
        for l in range(L - 1, -1, -1):
            dW = lam_zd.T @ Ad[l] + lam_z.T @ A[l]
            db = lam_z.sum(axis=0)
            grads[l] = (dW, db)
            if l > 0:
                lam_ad = lam_zd @ self.Ws[l]
                lam_a = lam_z @ self.Ws[l]
                sp = 1.0 - A[l] ** 2
                spp_zd = -2.0 * A[l] * sp * Zd[l]
                lam_z = sp * lam_a + spp_zd * lam_ad
                lam_zd = sp * lam_ad
        return grads

    # -- parameter vector ---------------------------------------------------

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.Ws, self.bs))

    def get_flat(self) -> Array:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.Ws, self.bs)])

    def set_flat(self, theta: Array):
        theta = np.asarray(theta, dtype=float)
        pos = 0
        for l in range(self.n_layers):
            size = self.Ws[l].size
            self.Ws[l] = theta[pos : pos + size].reshape(self.Ws[l].shape).copy()
            pos += size
            size = self.bs[l].size
            self.bs[l] = theta[pos : pos + size].copy()
            pos += size
        if pos != theta.size:
            raise ConfigurationError("flat parameter vector has the wrong length")

    @staticmethod
    def flatten_grads(grads) -> Array:
        return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "weights": [W.tolist() for W in self.Ws],
            "biases": [b.tolist() for b in self.bs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        net = cls(d["widths"])
        net.Ws = [np.asarray(W, dtype=float) for W in d["weights"]]
        net.bs = [np.asarray(b, dtype=float) for b in d["biases"]]
        for l, (W, b) in enumerate(zip(net.Ws, net.bs)):
            if W.shape != (net.widths[l + 1], net.widths[l]) or b.shape != (net.widths[l + 1],):
                raise ConfigurationError("network file is inconsistent with its widths")
        return net


class Adam:
    """Adam on a flat parameter vector (per-parameter adaptive step scaling)."""

    def __init__(self, n_params: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, theta: Array, grad: Array) -> Array:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)
