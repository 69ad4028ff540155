"""Recurrent cell mathematics: step forward/backward, masked unrolling,
bidirectional wrapping and layer stacking.

Batch-first convention: activations are (batch, features) matrices, input
weights W are (input, hidden), recurrent weights U are (hidden, hidden) and
biases are (1, hidden) rows, so a step reads h = g(x @ W + h_prev @ U + b).

Masking uses pass-through semantics: at a masked step the carried state is
left untouched (h_t = h_{t-1}, c_t = c_{t-1}) and the step contributes
exactly zero gradient, which makes trailing padding neutral bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import DimensionError, UsageError
from .tensor import Param, activate, activate_backward


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def _bias(hidden: int, value: float = 0.0) -> np.ndarray:
    return np.full((1, hidden), value, dtype=np.float64)


@dataclass
class RnnCellWeights:
    W: Param
    U: Param
    b: Param


@dataclass
class LstmCellWeights:
    W_f: Param
    U_f: Param
    b_f: Param
    W_i: Param
    U_i: Param
    b_i: Param
    W_o: Param
    U_o: Param
    b_o: Param
    W_c: Param
    U_c: Param
    b_c: Param


@dataclass
class GruCellWeights:
    W_z: Param
    U_z: Param
    b_z: Param
    W_r: Param
    U_r: Param
    b_r: Param
    W_h: Param
    U_h: Param
    b_h: Param


def _named_params(weights, prefix: str) -> dict[str, Param]:
    return {f"{prefix}.{f.name}": getattr(weights, f.name) for f in fields(weights)}


def _check_block(name: str, W: Param, U: Param, b: Param, input_size: int, hidden: int):
    if W.shape != (input_size, hidden):
        raise DimensionError(f"{name}: W shape {W.shape} != ({input_size}, {hidden})")
    if U.shape != (hidden, hidden):
        raise DimensionError(f"{name}: U shape {U.shape} != ({hidden}, {hidden})")
    if b.shape != (1, hidden):
        raise DimensionError(f"{name}: bias shape {b.shape} != (1, {hidden})")


class RnnCell:
    """Plain recurrent cell: h_t = g(W x_t + U h_{t-1} + b)."""

    kind = "rnn"
    has_memory_cell = False

    def __init__(self, weights: RnnCellWeights, activation: str = "tanh"):
        self.w = weights
        self.activation = activation
        self.input_size = weights.W.shape[0]
        self.hidden_size = weights.W.shape[1]
        _check_block("rnn", weights.W, weights.U, weights.b, self.input_size, self.hidden_size)

    @classmethod
    def create(cls, input_size, hidden_size, rng_for, activation="tanh"):
        w = RnnCellWeights(
            W=Param(glorot(rng_for("W"), input_size, hidden_size)),
            U=Param(glorot(rng_for("U"), hidden_size, hidden_size)),
            b=Param(_bias(hidden_size)),
        )
        return cls(w, activation)

    def params(self, prefix: str) -> dict[str, Param]:
        return _named_params(self.w, prefix)

    def step(self, x, h_prev):
        pre = x @ self.w.W.value + h_prev @ self.w.U.value + self.w.b.value
        h = activate(self.activation, pre)
        return h, (x, h_prev, pre, h)

    def step_backward(self, cache, dh):
        x, h_prev, pre, h = cache
        dpre = activate_backward(self.activation, dh, x=pre, out=h)
        self.w.W.grad += x.T @ dpre
        self.w.U.grad += h_prev.T @ dpre
        self.w.b.grad += dpre.sum(axis=0, keepdims=True)
        dx = dpre @ self.w.W.value.T
        dh_prev = dpre @ self.w.U.value.T
        return dx, dh_prev


class LstmCell:
    """LSTM with forget/input/output gates and a carried memory cell."""

    kind = "lstm"
    has_memory_cell = True

    def __init__(self, weights: LstmCellWeights, activation: str = "tanh"):
        self.w = weights
        self.activation = activation  # g for the candidate cell and the output path
        self.input_size = weights.W_f.shape[0]
        self.hidden_size = weights.W_f.shape[1]
        for gate in ("f", "i", "o", "c"):
            _check_block(
                f"lstm gate {gate}",
                getattr(weights, f"W_{gate}"),
                getattr(weights, f"U_{gate}"),
                getattr(weights, f"b_{gate}"),
                self.input_size,
                self.hidden_size,
            )

    @classmethod
    def create(cls, input_size, hidden_size, rng_for, activation="tanh", forget_bias=0.0):
        def block(gate, bias_value=0.0):
            return (
                Param(glorot(rng_for(f"W_{gate}"), input_size, hidden_size)),
                Param(glorot(rng_for(f"U_{gate}"), hidden_size, hidden_size)),
                Param(_bias(hidden_size, bias_value)),
            )

        W_f, U_f, b_f = block("f", forget_bias)
        W_i, U_i, b_i = block("i")
        W_o, U_o, b_o = block("o")
        W_c, U_c, b_c = block("c")
        w = LstmCellWeights(W_f, U_f, b_f, W_i, U_i, b_i, W_o, U_o, b_o, W_c, U_c, b_c)
        return cls(w, activation)

    def params(self, prefix: str) -> dict[str, Param]:
        return _named_params(self.w, prefix)

    def _gate(self, name, x, h_prev):
        w = self.w
        return (
            x @ getattr(w, f"W_{name}").value
            + h_prev @ getattr(w, f"U_{name}").value
            + getattr(w, f"b_{name}").value
        )

    def step(self, x, h_prev, c_prev):
        f = activate("sigmoid", self._gate("f", x, h_prev))
        i = activate("sigmoid", self._gate("i", x, h_prev))
        o = activate("sigmoid", self._gate("o", x, h_prev))
        pre_c = self._gate("c", x, h_prev)
        c_bar = activate(self.activation, pre_c)
        c = f * c_prev + i * c_bar
        gc = activate(self.activation, c)
        h = o * gc
        cache = (x, h_prev, c_prev, f, i, o, pre_c, c_bar, c, gc)
        return h, c, cache

    def step_backward(self, cache, dh, dc_in):
        x, h_prev, c_prev, f, i, o, pre_c, c_bar, c, gc = cache
        w = self.w
        do = dh * gc
        dc = dc_in + activate_backward(self.activation, dh * o, x=c, out=gc)
        df = dc * c_prev
        di = dc * c_bar
        dc_bar = dc * i
        dc_prev = dc * f

        dpre_o = do * o * (1.0 - o)
        dpre_f = df * f * (1.0 - f)
        dpre_i = di * i * (1.0 - i)
        dpre_c = activate_backward(self.activation, dc_bar, x=pre_c, out=c_bar)

        dx = np.zeros_like(x)
        dh_prev = np.zeros_like(h_prev)
        for gate, dpre in (("f", dpre_f), ("i", dpre_i), ("o", dpre_o), ("c", dpre_c)):
            Wp = getattr(w, f"W_{gate}")
            Up = getattr(w, f"U_{gate}")
            bp = getattr(w, f"b_{gate}")
            Wp.grad += x.T @ dpre
            Up.grad += h_prev.T @ dpre
            bp.grad += dpre.sum(axis=0, keepdims=True)
            dx += dpre @ Wp.value.T
            dh_prev += dpre @ Up.value.T
        return dx, dh_prev, dc_prev


class GruCell:
    """GRU with update gate z and reset gate r.

    Candidate state uses the standard form h~ = g(W_h x + U_h (r * h_prev) + b_h).
    """

    kind = "gru"
    has_memory_cell = False

    def __init__(self, weights: GruCellWeights, activation: str = "tanh"):
        self.w = weights
        self.activation = activation
        self.input_size = weights.W_z.shape[0]
        self.hidden_size = weights.W_z.shape[1]
        for gate in ("z", "r", "h"):
            _check_block(
                f"gru gate {gate}",
                getattr(weights, f"W_{gate}"),
                getattr(weights, f"U_{gate}"),
                getattr(weights, f"b_{gate}"),
                self.input_size,
                self.hidden_size,
            )

    @classmethod
    def create(cls, input_size, hidden_size, rng_for, activation="tanh"):
        def block(gate):
            return (
                Param(glorot(rng_for(f"W_{gate}"), input_size, hidden_size)),
                Param(glorot(rng_for(f"U_{gate}"), hidden_size, hidden_size)),
                Param(_bias(hidden_size)),
            )

        W_z, U_z, b_z = block("z")
        W_r, U_r, b_r = block("r")
        W_h, U_h, b_h = block("h")
        return cls(GruCellWeights(W_z, U_z, b_z, W_r, U_r, b_r, W_h, U_h, b_h), activation)

    def params(self, prefix: str) -> dict[str, Param]:
        return _named_params(self.w, prefix)

    def step(self, x, h_prev):
        w = self.w
        z = activate("sigmoid", x @ w.W_z.value + h_prev @ w.U_z.value + w.b_z.value)
        r = activate("sigmoid", x @ w.W_r.value + h_prev @ w.U_r.value + w.b_r.value)
        rh = r * h_prev
        pre_h = x @ w.W_h.value + rh @ w.U_h.value + w.b_h.value
        h_bar = activate(self.activation, pre_h)
        h = (1.0 - z) * h_prev + z * h_bar
        cache = (x, h_prev, z, r, rh, pre_h, h_bar)
        return h, cache

    def step_backward(self, cache, dh):
        x, h_prev, z, r, rh, pre_h, h_bar = cache
        w = self.w
        dz = dh * (h_bar - h_prev)
        dh_bar = dh * z
        dh_prev = dh * (1.0 - z)

        dpre_h = activate_backward(self.activation, dh_bar, x=pre_h, out=h_bar)
        drh = dpre_h @ w.U_h.value.T
        dr = drh * h_prev
        dh_prev = dh_prev + drh * r

        dpre_z = dz * z * (1.0 - z)
        dpre_r = dr * r * (1.0 - r)
        dh_prev = dh_prev + dpre_z @ w.U_z.value.T + dpre_r @ w.U_r.value.T
        dx = dpre_z @ w.W_z.value.T + dpre_r @ w.W_r.value.T + dpre_h @ w.W_h.value.T

        w.W_z.grad += x.T @ dpre_z
        w.U_z.grad += h_prev.T @ dpre_z
        w.b_z.grad += dpre_z.sum(axis=0, keepdims=True)
        w.W_r.grad += x.T @ dpre_r
        w.U_r.grad += h_prev.T @ dpre_r
        w.b_r.grad += dpre_r.sum(axis=0, keepdims=True)
        w.W_h.grad += x.T @ dpre_h
        w.U_h.grad += rh.T @ dpre_h
        w.b_h.grad += dpre_h.sum(axis=0, keepdims=True)
        return dx, dh_prev


def rnn_step(cell: RnnCell, x, h_prev):
    return cell.step(x, h_prev)[0]


def lstm_step(cell: LstmCell, x, h_prev, c_prev):
    h, c, _ = cell.step(x, h_prev, c_prev)
    return h, c


def gru_step(cell: GruCell, x, h_prev):
    return cell.step(x, h_prev)[0]


def _as_mask(mask, T: int, batch: int) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.shape != (T, batch):
        raise DimensionError(f"mask shape {m.shape} != ({T}, {batch})")
    return m


@dataclass
class SequenceState:
    """Unrolled recurrence: per-step hidden states plus backward caches."""

    outputs: list[np.ndarray]
    cell_states: list[np.ndarray] | None
    caches: list | None
    mask: np.ndarray
    h0: np.ndarray
    c0: np.ndarray | None

    @property
    def final(self) -> np.ndarray:
        return self.outputs[-1] if self.outputs else self.h0


def unroll(cell, inputs, mask, h0=None, c0=None, training=True) -> SequenceState:
    """Run the cell over the sequence, passing state through masked steps."""
    T = len(inputs)
    if T < 1:
        raise DimensionError("cannot unroll an empty sequence")
    batch = inputs[0].shape[0]
    m_all = _as_mask(mask, T, batch)

    h = np.zeros((batch, cell.hidden_size)) if h0 is None else h0
    c = None
    if cell.has_memory_cell:
        c = np.zeros((batch, cell.hidden_size)) if c0 is None else c0

    outputs, cell_states = [], [] if cell.has_memory_cell else None
    caches = [] if training else None
    for t in range(T):
        mt = m_all[t]
        if not mt.any():
            cache = None
        else:
            m = mt[:, None].astype(np.float64)
            if cell.has_memory_cell:
                h_new, c_new, cache = cell.step(inputs[t], h, c)
                c = m * c_new + (1.0 - m) * c
            else:
                h_new, cache = cell.step(inputs[t], h)
            h = m * h_new + (1.0 - m) * h
        outputs.append(h)
        if cell.has_memory_cell:
            cell_states.append(c)
        if training:
            caches.append(cache)
    return SequenceState(
        outputs=outputs,
        cell_states=cell_states,
        caches=caches,
        mask=m_all,
        h0=np.zeros((batch, cell.hidden_size)) if h0 is None else h0,
        c0=(np.zeros((batch, cell.hidden_size)) if c0 is None else c0) if cell.has_memory_cell else None,
    )


def unroll_backward(cell, state: SequenceState, d_outputs):
    """Backpropagate through time.

    d_outputs: per-step upstream gradients (entries may be None). Parameter
    gradients accumulate into the cell's Params; returns (d_inputs, d_h0).
    """
    if state.caches is None:
        raise UsageError("backward pass requires an unroll run in training mode")
    T = len(state.outputs)
    if len(d_outputs) != T:
        raise DimensionError(f"got {len(d_outputs)} upstream gradients for {T} steps")
    batch = state.outputs[0].shape[0]
    dh = np.zeros((batch, cell.hidden_size))
    dc = np.zeros_like(dh) if cell.has_memory_cell else None
    d_inputs = [None] * T
    for t in range(T - 1, -1, -1):
        if d_outputs[t] is not None:
            dh = dh + d_outputs[t]
        cache = state.caches[t]
        if cache is None:  # whole step masked: state passed straight through
            d_inputs[t] = np.zeros((batch, cell.input_size))
            continue
        m = state.mask[t][:, None].astype(np.float64)
        if cell.has_memory_cell:
            dx, dh_step, dc_step = cell.step_backward(cache, dh * m, dc * m)
            dc = dc * (1.0 - m) + dc_step
        else:
            dx, dh_step = cell.step_backward(cache, dh * m)
        dh = dh * (1.0 - m) + dh_step
        d_inputs[t] = dx
    return d_inputs, dh


def reverse_within_mask(arrays, mask) -> list[np.ndarray]:
    """Reverse each row's valid prefix, leaving trailing padding in place.

    This map is an involution, so it serves both for reversing inputs and
    for routing gradients back.
    """
    T = len(arrays)
    batch = arrays[0].shape[0]
    m = _as_mask(mask, T, batch)
    lengths = m.sum(axis=0)
    stacked = np.stack(arrays)  # (T, batch, F)
    t_idx = np.arange(T)[:, None]
    src = np.where(t_idx < lengths[None, :], lengths[None, :] - 1 - t_idx, t_idx)
    gathered = stacked[src, np.arange(batch)[None, :], :]
    return [gathered[t] for t in range(T)]


@dataclass
class BiSequenceState:
    """Two independent unrolls, aligned back to original step positions."""

    forward: SequenceState
    backward: SequenceState
    outputs: list[np.ndarray]  # per-step [fwd_t || bwd aligned at t]
    mask: np.ndarray

    @property
    def final(self) -> np.ndarray:
        """Each direction's own final state, concatenated."""
        return np.concatenate([self.forward.outputs[-1], self.backward.outputs[-1]], axis=1)


def bidirectional(fwd_cell, bwd_cell, inputs, mask, training=True) -> BiSequenceState:
    if fwd_cell.hidden_size != bwd_cell.hidden_size:
        raise DimensionError(
            f"bidirectional hidden sizes differ: {fwd_cell.hidden_size} vs {bwd_cell.hidden_size}"
        )
    fwd = unroll(fwd_cell, inputs, mask, training=training)
    rev_inputs = reverse_within_mask(inputs, mask)
    bwd = unroll(bwd_cell, rev_inputs, mask, training=training)
    aligned = reverse_within_mask(bwd.outputs, mask)
    outputs = [np.concatenate([f, b], axis=1) for f, b in zip(fwd.outputs, aligned)]
    return BiSequenceState(forward=fwd, backward=bwd, outputs=outputs, mask=fwd.mask)


def bidirectional_backward(fwd_cell, bwd_cell, state: BiSequenceState, d_outputs, d_final=None):
    """Route aligned upstream gradients into both directions; returns d_inputs."""
    T = len(state.outputs)
    H = fwd_cell.hidden_size
    batch = state.outputs[0].shape[0]
    d_fwd = [None if d is None else d[:, :H] for d in d_outputs]
    d_bwd_aligned = [
        np.zeros((batch, H)) if d is None else d[:, H:] for d in d_outputs
    ]
    d_bwd = reverse_within_mask(d_bwd_aligned, state.mask)
    if d_final is not None:
        d_fwd[T - 1] = (np.zeros((batch, H)) if d_fwd[T - 1] is None else d_fwd[T - 1]) + d_final[:, :H]
        d_bwd[T - 1] = d_bwd[T - 1] + d_final[:, H:]
    d_in_fwd, _ = unroll_backward(fwd_cell, state.forward, d_fwd)
    d_in_bwd_rev, _ = unroll_backward(bwd_cell, state.backward, d_bwd)
    d_in_bwd = reverse_within_mask(d_in_bwd_rev, state.mask)
    return [a + b for a, b in zip(d_in_fwd, d_in_bwd)]


class RecurrentLayer:
    """Unidirectional layer wrapper with the uniform forward/backward surface."""

    def __init__(self, cell):
        self.cell = cell
        self.input_size = cell.input_size
        self.width = cell.hidden_size

    def params(self, prefix):
        return self.cell.params(prefix)

    def forward(self, inputs, mask, training):
        return unroll(self.cell, inputs, mask, training=training)

    def backward(self, state, d_outputs, d_final=None):
        if d_final is not None:
            T = len(state.outputs)
            d_outputs = list(d_outputs)
            d_outputs[T - 1] = (
                d_final if d_outputs[T - 1] is None else d_outputs[T - 1] + d_final
            )
        d_inputs, _ = unroll_backward(self.cell, state, d_outputs)
        return d_inputs


class BidirectionalLayer:
    """Forward and backward cells over the same sequence, outputs concatenated."""

    def __init__(self, fwd_cell, bwd_cell):
        self.fwd_cell = fwd_cell
        self.bwd_cell = bwd_cell
        self.input_size = fwd_cell.input_size
        self.width = fwd_cell.hidden_size + bwd_cell.hidden_size

    def params(self, prefix):
        out = self.fwd_cell.params(f"{prefix}.fwd")
        out.update(self.bwd_cell.params(f"{prefix}.bwd"))
        return out

    def forward(self, inputs, mask, training):
        return bidirectional(self.fwd_cell, self.bwd_cell, inputs, mask, training=training)

    def backward(self, state, d_outputs, d_final=None):
        return bidirectional_backward(self.fwd_cell, self.bwd_cell, state, d_outputs, d_final)


@dataclass
class StackState:
    layer_states: list
    dropout_masks: list  # per gap: list of per-step masks, or None
    mask: np.ndarray

    @property
    def top(self):
        return self.layer_states[-1]


class RecurrentStack:
    """Recurrent layers feeding each other's full step sequences, with
    inverted dropout applied between layers while training."""

    def __init__(self, layers, dropout_rate: float = 0.0, name: str = "rnn"):
        for lower, upper in zip(layers, layers[1:]):
            if upper.input_size != lower.width:
                raise DimensionError(
                    f"layer input width {upper.input_size} != previous output width {lower.width}"
                )
        self.layers = layers
        self.dropout_rate = dropout_rate
        self.name = name

    @property
    def width(self):
        return self.layers[-1].width

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{self.name}.l{i}"))
        return out

    def forward(self, inputs, mask, training, dropout=None) -> StackState:
        states, gap_masks = [], []
        seq = inputs
        for i, layer in enumerate(self.layers):
            state = layer.forward(seq, mask, training)
            states.append(state)
            if i == len(self.layers) - 1:
                break
            seq = state.outputs
            if training and self.dropout_rate > 0.0 and dropout is not None:
                masks = [
                    dropout.mask(f"{self.name}.drop{i}", h.shape, self.dropout_rate)
                    for h in seq
                ]
                seq = [h * m for h, m in zip(seq, masks)]
                gap_masks.append(masks)
            else:
                gap_masks.append(None)
        return StackState(layer_states=states, dropout_masks=gap_masks, mask=states[0].mask)

    def backward(self, state: StackState, d_top_outputs, d_top_final=None):
        d_steps = d_top_outputs
        d_final = d_top_final
        for i in range(len(self.layers) - 1, -1, -1):
            d_inputs = self.layers[i].backward(state.layer_states[i], d_steps, d_final)
            d_final = None
            if i > 0:
                masks = state.dropout_masks[i - 1]
                if masks is not None:
                    d_inputs = [d * m for d, m in zip(d_inputs, masks)]
                d_steps = d_inputs
        return d_inputs
