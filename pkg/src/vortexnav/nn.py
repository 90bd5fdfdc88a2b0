"""Small dense networks with hand-written backprop, Adam, and the cosine
quantile embedding used by the IQN head.

Topology (both kinds): separate relu encoders for velocity, goal and LiDAR,
concatenated and merged into a 128-d state feature. DQN maps that feature
through ``hidden`` to one value per action. IQN multiplies it element-wise
with an embedding of the quantile fraction before ``hidden``, giving one
value per (quantile, action).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_COS = 64
CHECKPOINT_FORMAT = "vortexnav-checkpoint/1"

DEFAULT_SIZES = {
    "velocity": 2,
    "goal": 2,
    "lidar": 61,
    "velocity_hidden": 32,
    "goal_hidden": 32,
    "lidar_hidden": 96,
    "feature": 128,
    "hidden": 128,
    "actions": 9,
}


def cosine_embed(tau, phi: float = 1.0) -> np.ndarray:
    """cos(pi * i * phi * tau) for i = 0..63; trailing axis is the feature."""
    x = phi * np.asarray(tau)
    if x.dtype.kind != "f":
        x = x.astype(float)
    return np.cos(np.pi * np.arange(N_COS, dtype=x.dtype) * x[..., None])


@dataclass
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def forward(self, x):
        pre = x @ self.weight + self.bias
        out = np.maximum(pre, 0) if self.activation == "relu" else pre
        return out, (x, pre)

    def backward(self, cache, dout):
        x, pre = cache
        if self.activation == "relu":
            dout = dout * (pre > 0)
        return dout @ self.weight.T, x.T @ dout, dout.sum(axis=0)


def _dense(rng, n_in, n_out, activation, dtype):
    limit = np.sqrt(6.0 / n_in)
    w = rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype)
    return Dense(w, np.zeros(n_out, dtype=dtype), activation)


@dataclass
class MlpModel:
    kind: str  # "dqn" or "iqn"
    layers: dict[str, Dense]
    sizes: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_SIZES))

    @classmethod
    def build(cls, kind: str, seed: int = 0, sizes: dict | None = None, dtype=np.float32) -> "MlpModel":
        if kind not in ("dqn", "iqn"):
            raise ValueError(f"unknown model kind {kind!r}")
        s = dict(DEFAULT_SIZES, **(sizes or {}))
        rng = np.random.default_rng(seed)
        layers = {
            "velocity": _dense(rng, s["velocity"], s["velocity_hidden"], "relu", dtype),
            "goal": _dense(rng, s["goal"], s["goal_hidden"], "relu", dtype),
            "lidar": _dense(rng, s["lidar"], s["lidar_hidden"], "relu", dtype),
            "merge": _dense(
                rng, s["velocity_hidden"] + s["goal_hidden"] + s["lidar_hidden"], s["feature"], "relu", dtype
            ),
        }
        if kind == "iqn":
            layers["cos"] = _dense(rng, N_COS, s["feature"], "relu", dtype)
        layers["hidden"] = _dense(rng, s["feature"], s["hidden"], "relu", dtype)
        layers["out"] = _dense(rng, s["hidden"], s["actions"], "identity", dtype)
        return cls(kind, layers, s)

    @property
    def dtype(self):
        return self.layers["out"].weight.dtype

    @property
    def n_actions(self) -> int:
        return self.sizes["actions"]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers.values():
            out += [layer.weight, layer.bias]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.kind,
            {k: Dense(v.weight.copy(), v.bias.copy(), v.activation) for k, v in self.layers.items()},
            dict(self.sizes),
        )

    def astype(self, dtype) -> "MlpModel":
        m = self.copy()
        for layer in m.layers.values():
            layer.weight = layer.weight.astype(dtype)
            layer.bias = layer.bias.astype(dtype)
        return m

    def load_state_from(self, other: "MlpModel") -> None:
        for p, q in zip(self.parameters(), other.parameters()):
            p[...] = q

    # -- forward / backward -------------------------------------------------
    def _check(self, features):
        vel, goal, lidar = features
        for name, arr in (("velocity", vel), ("goal", goal), ("lidar", lidar)):
            if arr.shape[-1] != self.sizes[name]:
                raise ValueError(f"{name} features have width {arr.shape[-1]}, model expects {self.sizes[name]}")

    def forward_cached(self, features, taus=None):
        """Batched forward pass that also returns the activations for ``backward``.

        ``features`` is a (velocity, goal, lidar) triple of (B, d) arrays. For
        IQN, ``taus`` is a (B, T) array of quantile fractions (already
        distorted) and the output has shape (B, T, A); DQN returns (B, A).
        """
        self._check(features)
        dt = self.dtype
        vel, goal, lidar = (np.asarray(f, dtype=dt) for f in features)
        L = self.layers
        hv, cv = L["velocity"].forward(vel)
        hg, cg = L["goal"].forward(goal)
        hl, cl = L["lidar"].forward(lidar)
        state, cm = L["merge"].forward(np.concatenate([hv, hg, hl], axis=1))
        cache = {"velocity": cv, "goal": cg, "lidar": cl, "merge": cm}
        if self.kind == "iqn":
            if taus is None:
                raise ValueError("IQN forward needs quantile fractions")
            taus = np.asarray(taus, dtype=dt)
            B, T = taus.shape
            emb, cc = L["cos"].forward(cosine_embed(taus).reshape(B * T, N_COS))
            rep = np.repeat(state, T, axis=0)
            x = rep * emb
            cache.update(cos=cc, emb=emb, rep=rep, shape=(B, T))
        else:
            x = state
        h, ch = L["hidden"].forward(x)
        out, co = L["out"].forward(h)
        cache.update(hidden=ch, out=co)
        if self.kind == "iqn":
            out = out.reshape(B, T, -1)
        return out, cache

    def forward(self, features, taus=None) -> np.ndarray:
        return self.forward_cached(features, taus)[0]

    def backward(self, cache, dout) -> list[np.ndarray]:
        """Parameter gradients (same order as ``parameters()``) for output gradient ``dout``."""
        L = self.layers
        grads: dict[str, tuple] = {}
        if self.kind == "iqn":
            B, T = cache["shape"]
            dout = np.asarray(dout).reshape(B * T, -1)
        dh, gw, gb = L["out"].backward(cache["out"], dout)
        grads["out"] = (gw, gb)
        dx, gw, gb = L["hidden"].backward(cache["hidden"], dh)
        grads["hidden"] = (gw, gb)
        if self.kind == "iqn":
            demb = dx * cache["rep"]
            dstate = (dx * cache["emb"]).reshape(B, T, -1).sum(axis=1)
            _, gw, gb = L["cos"].backward(cache["cos"], demb)
            grads["cos"] = (gw, gb)
        else:
            dstate = dx
        dcat, gw, gb = L["merge"].backward(cache["merge"], dstate)
        grads["merge"] = (gw, gb)
        splits = np.cumsum([self.sizes["velocity_hidden"], self.sizes["goal_hidden"]])
        for name, part in zip(("velocity", "goal", "lidar"), np.split(dcat, splits, axis=1)):
            _, gw, gb = L[name].backward(cache[name], part)
            grads[name] = (gw, gb)
        out = []
        for name in L:
            out += list(grads[name])
        return out


class Adam:
    """Bias-corrected Adam over a fixed list of parameter arrays (updated in place)."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameters")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam_t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam_m{i}"] = m
            out[f"adam_v{i}"] = v
        return out

    def load_state_arrays(self, data) -> None:
        self.t = int(data["adam_t"])
        for i in range(len(self.params)):
            self.m[i][...] = data[f"adam_m{i}"]
            self.v[i][...] = data[f"adam_v{i}"]


def adam_step(model: MlpModel, grads: list[np.ndarray], state: Adam) -> MlpModel:
    if any(a is not b for a, b in zip(state.params, model.parameters())):
        raise ValueError("optimizer state belongs to a different model")
    state.step(grads)
    return model


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(model: MlpModel, path, **meta) -> None:
    """Text checkpoint: JSON metadata plus row-major decimal weights per layer.

    Decimal values are the shortest round-trip repr of each float, so loading
    reproduces the arrays bit for bit.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "dtype": str(model.dtype),
        "sizes": model.sizes,
        **meta,
        "layers": [
            {
                "name": name,
                "activation": layer.activation,
                "shape": list(layer.weight.shape),
                "weight": [float(x) for x in layer.weight.ravel()],
                "bias": [float(x) for x in layer.bias],
            }
            for name, layer in model.layers.items()
        ],
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc) + "\n")
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a vortexnav checkpoint")
    return doc


def load_checkpoint(path) -> tuple[MlpModel, dict]:
    doc = read_checkpoint(path)
    dtype = np.dtype(doc["dtype"])
    layers = {}
    for entry in doc["layers"]:
        w = np.array(entry["weight"], dtype=dtype).reshape(entry["shape"])
        layers[entry["name"]] = Dense(w, np.array(entry["bias"], dtype=dtype), entry["activation"])
    meta = {k: v for k, v in doc.items() if k not in ("layers", "format")}
    return MlpModel(doc["kind"], layers, dict(doc["sizes"])), meta
