from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        arrays = {f"m/{k}": a for k, a in self.m.items()}
        arrays.update({f"v/{k}": a for k, a in self.v.items()})
        np.savez(buf, t=np.int64(self.t), **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AdamState":
        with np.load(io.BytesIO(raw)) as z:
            state = cls(t=int(z["t"]))
            for key in z.files:
                if key.startswith("m/"):
                    state.m[key[2:]] = z[key]
                elif key.startswith("v/"):
                    state.v[key[2:]] = z[key]
        return state


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    t: int,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update at step ``t`` (1-based)."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    new_params, m_out, v_out = {}, {}, {}
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = (w - update).astype(w.dtype, copy=False)
        m_out[name] = m.astype(w.dtype, copy=False)
        v_out[name] = v.astype(w.dtype, copy=False)
    return new_params, AdamState(m_out, v_out, t)
