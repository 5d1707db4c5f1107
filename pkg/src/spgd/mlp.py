"""Fully connected networks with hand-written forward and reverse derivatives.

Parameters are packed into one flat vector, layer by layer; inside a layer
the weight matrix (``out x in``, row-major) comes before the bias.  Hidden
layers use a smooth activation, the output layer is affine.

Besides the network value, the forward pass can propagate the gradient and
the Laplacian with respect to the *inputs*.  This is what a collocation loss
for a second-order PDE needs, and all derivatives with respect to the
parameters (JVP, VJP, per-sample Jacobian rows) are available for both the
plain value and the Laplacian.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError


def _tanh(z, order):
    t = np.tanh(z)
    s1 = 1.0 - t * t
    if order == 1:
        return t, s1, None, None
    s2 = -2.0 * t * s1
    return t, s1, s2, s1 * (6.0 * t * t - 2.0)


def _relu3(z, order):
    r = np.maximum(z, 0.0)
    if order == 1:
        return r**3, 3.0 * r * r, None, None
    return r**3, 3.0 * r * r, 6.0 * r, 6.0 * (z > 0)


ACTIVATIONS = {"tanh": _tanh, "relu3": _relu3}


class _Layer:
    """Cached quantities of one affine layer and the activation after it."""

    __slots__ = ("a", "da", "la", "s1", "s2", "s3", "dz", "lz", "q")

    def __init__(self, a, da=None, la=None):
        self.a, self.da, self.la = a, da, la
        self.s1 = self.s2 = self.s3 = self.dz = self.lz = self.q = None


class Mlp:
    """Network ``widths[0] -> widths[1] -> ... -> widths[-1]``."""

    def __init__(self, widths, activation: str = "tanh"):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise InvalidInputError(f"invalid layer widths {widths}")
        if activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self._act = ACTIVATIONS[activation]
        self.shapes = [(o, i) for i, o in zip(widths[:-1], widths[1:])]
        offsets = [0]
        for o, i in self.shapes:
            offsets.append(offsets[-1] + o * i + o)
        self._offsets = offsets
        self.n_params = offsets[-1]

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise InvalidInputError(
                f"parameter vector has shape {theta.shape}, expected ({self.n_params},)"
            )
        params = []
        for (o, i), start in zip(self.shapes, self._offsets):
            w = theta[start : start + o * i].reshape(o, i)
            b = theta[start + o * i : start + o * i + o]
            params.append((w, b))
        return params

    def pack(self, params) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in params])

    def init_xavier(self, rng: np.random.Generator) -> np.ndarray:
        """Xavier-normal weights, zero biases."""
        params = []
        for o, i in self.shapes:
            std = np.sqrt(2.0 / (i + o))
            params.append((rng.standard_normal((o, i)) * std, np.zeros(o)))
        return self.pack(params)

    def linearize(self, theta, x, laplacian: bool = False) -> "Linearization":
        return Linearization(self, theta, x, laplacian)

    def forward(self, theta, x) -> np.ndarray:
        """Network output, ``B x out``."""
        return self.linearize(theta, x).u

    def forward_laplacian(self, theta, x):
        """Output and its input-Laplacian, both ``B x out``."""
        lin = self.linearize(theta, x, laplacian=True)
        return lin.u, lin.lu

    def jvp(self, theta, x, tangent, laplacian: bool = False):
        """Directional derivative of the output (and of its Laplacian) along ``tangent``."""
        return self.linearize(theta, x, laplacian).jvp(tangent)

    def vjp(self, theta, x, cotangent, lap_cotangent=None) -> np.ndarray:
        """Gradient of ``<cotangent, u> + <lap_cotangent, Laplacian u>`` in theta."""
        lin = self.linearize(theta, x, laplacian=lap_cotangent is not None)
        return lin.vjp(cotangent, lap_cotangent)

    def per_sample_grads(self, theta, x, laplacian: bool = False) -> np.ndarray:
        return self.linearize(theta, x, laplacian).per_sample_grads()


class Linearization:
    """Forward pass at fixed ``theta`` and inputs, reusable for many JVPs/VJPs."""

    def __init__(self, net: Mlp, theta, x, laplacian: bool = False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != net.in_dim:
            raise InvalidInputError(f"inputs must have shape (B, {net.in_dim}), got {x.shape}")
        self.net = net
        self.x = x
        self.laplacian = laplacian
        self.params = net.unpack(theta)
        self._forward()

    def _forward(self):
        lap = self.laplacian
        x = self.x
        batch, d = x.shape
        act = self.net._act
        a = x
        da = np.broadcast_to(np.eye(d), (batch, d, d)) if lap else None
        la = np.zeros((batch, d)) if lap else None
        self.layers = []
        last = len(self.params) - 1
        for idx, (w, b) in enumerate(self.params):
            layer = _Layer(a, da, la)
            self.layers.append(layer)
            z = a @ w.T + b
            if lap:
                dz = da @ w.T
                lz = la @ w.T
            if idx == last:
                self.u = z
                self.lu = lz if lap else None
                return
            a, layer.s1, layer.s2, layer.s3 = act(z, 2 if lap else 1)
            if lap:
                q = np.einsum("bkh,bkh->bh", dz, dz)
                layer.dz, layer.lz, layer.q = dz, lz, q
                da = layer.s1[:, None, :] * dz
                la = layer.s1 * lz + layer.s2 * q

    def jvp(self, tangent):
        lap = self.laplacian
        dparams = self.net.unpack(tangent)
        last = len(self.params) - 1
        ta = tda = tla = None
        for idx, (layer, (w, _), (dw, db)) in enumerate(zip(self.layers, self.params, dparams)):
            tz = layer.a @ dw.T + db
            if lap:
                tdz = layer.da @ dw.T
                tlz = layer.la @ dw.T
            if idx > 0:
                tz += ta @ w.T
                if lap:
                    tdz += tda @ w.T
                    tlz += tla @ w.T
            if idx == last:
                return (tz, tlz) if lap else tz
            s1 = layer.s1
            ta = s1 * tz
            if lap:
                s2, s3, dz = layer.s2, layer.s3, layer.dz
                tq = 2.0 * np.einsum("bkh,bkh->bh", dz, tdz)
                tda = (s2 * tz)[:, None, :] * dz + s1[:, None, :] * tdz
                tla = s2 * tz * layer.lz + s1 * tlz + s3 * tz * layer.q + s2 * tq
        raise AssertionError("unreachable")

    def _backward(self, gu, gl, per_sample):
        """Pull output cotangents back to parameter space.

        With ``per_sample`` the batch axis is kept, giving one gradient row per
        input point (a Jacobian block) instead of their sum.
        """
        lap = gl is not None
        grads = [None] * len(self.params)
        bar_z, bar_dz, bar_lz = gu, None, gl
        if lap:
            bar_dz = np.zeros((gu.shape[0], self.x.shape[1], gu.shape[1]))
        for idx in range(len(self.params) - 1, -1, -1):
            w, _ = self.params[idx]
            layer = self.layers[idx]
            if per_sample:
                gw = np.einsum("bo,bi->boi", bar_z, layer.a)
                if lap:
                    gw += np.einsum("bko,bki->boi", bar_dz, layer.da)
                    gw += np.einsum("bo,bi->boi", bar_lz, layer.la)
                grads[idx] = (gw, bar_z)
            else:
                gw = bar_z.T @ layer.a
                if lap:
                    gw += np.einsum("bko,bki->oi", bar_dz, layer.da)
                    gw += bar_lz.T @ layer.la
                grads[idx] = (gw, bar_z.sum(axis=0))
            if idx == 0:
                break
            bar_a = bar_z @ w
            prev = self.layers[idx - 1]
            s1 = prev.s1
            if lap:
                s2 = prev.s2
                bar_da = bar_dz @ w
                bar_la = bar_lz @ w
                bar_z = (
                    s1 * bar_a
                    + s2 * np.einsum("bkh,bkh->bh", bar_da, prev.dz)
                    + bar_la * (s2 * prev.lz + prev.s3 * prev.q)
                )
                bar_dz = s1[:, None, :] * bar_da + 2.0 * (s2 * bar_la)[:, None, :] * prev.dz
                bar_lz = s1 * bar_la
            else:
                bar_z = s1 * bar_a
        return grads

    def vjp(self, cotangent, lap_cotangent=None) -> np.ndarray:
        gu = np.asarray(cotangent, dtype=np.float64).reshape(self.u.shape)
        gl = None
        if lap_cotangent is not None:
            if not self.laplacian:
                raise InvalidInputError("linearization was built without the Laplacian")
            gl = np.asarray(lap_cotangent, dtype=np.float64).reshape(self.u.shape)
        return self.net.pack(self._backward(gu, gl, per_sample=False))

    def per_sample_grads(self) -> np.ndarray:
        """Rows ``d u(x_i) / d theta`` (of the Laplacian if built with it), ``B x n_params``."""
        if self.net.out_dim != 1:
            raise InvalidInputError("per-sample gradients need a scalar-output network")
        ones = np.ones_like(self.u)
        if self.laplacian:
            grads = self._backward(np.zeros_like(ones), ones, per_sample=True)
        else:
            grads = self._backward(ones, None, per_sample=True)
        batch = self.x.shape[0]
        return np.concatenate(
            [np.concatenate([gw.reshape(batch, -1), gb.reshape(batch, -1)], axis=1) for gw, gb in grads],
            axis=1,
        )
