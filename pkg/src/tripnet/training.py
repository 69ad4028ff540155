"""Losses, the Adam optimizer, the epoch loop and the gradient-check harness."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import cells, metrics, network, rng, tensor
from .embedding import EmbeddingTables, embed, embed_backward, make_schema
from .errors import ContractError, NumericError
from .network import Batch, NetworkConfig, NetworkWeights
from .pipeline import Dataset
from .rng import DropoutStreams, FrozenDropout
from .tensor import activate, activate_backward


def cross_entropy(probs: np.ndarray, labels: np.ndarray):
    """Row-wise cross entropy against integer labels.

    Returns (per-row losses, gradient w.r.t. pre-softmax logits); each
    gradient row is probs - one_hot(label), unscaled.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ContractError(f"probs {probs.shape} and labels {labels.shape} do not align")
    k = probs.shape[1]
    if ((labels < 0) | (labels >= k)).any():
        raise ContractError(f"labels outside [0, {k})")
    rows = np.arange(len(labels))
    losses = -np.log(probs[rows, labels])
    d_logits = probs.copy()
    d_logits[rows, labels] -= 1.0
    return losses, d_logits


@dataclass(frozen=True)
class LossSpec:
    w_mode: float = 1.0
    w_purpose: float = 1.0

    def __post_init__(self):
        if self.w_mode < 0 or self.w_purpose < 0:
            raise ContractError("loss weights must be >= 0")
        if max(self.w_mode, self.w_purpose) <= 0:
            raise ContractError("at least one loss weight must be positive")

    def weight(self, head: str) -> float:
        return self.w_mode if head == "mode" else self.w_purpose


def multitask_loss(spec: LossSpec, head_losses: dict[str, float]) -> float:
    """Weighted sum of per-head losses."""
    total = 0.0
    for head, value in head_losses.items():
        if not np.isfinite(value):
            raise NumericError(f"{head} loss is not finite")
        total += spec.weight(head) * value
    return total


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {k!r}; aborting run")
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state(self, state: dict) -> None:
        self.t = state["t"]
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]


@dataclass(frozen=True)
class TrainRunConfig:
    epochs: int = 200
    report_epoch: int = 100
    batch_size: int = 64
    seed: int = 0
    split_fractions: tuple[float, float] = (0.8, 0.2)
    eval_batch_size: int = 256
    average: str = "macro"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch size must be >= 1")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ContractError(f"split fractions {self.split_fractions} do not sum to 1")

    def to_jsonable(self) -> dict:
        return {
            "epochs": self.epochs,
            "report_epoch": self.report_epoch,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "split_fractions": list(self.split_fractions),
            "eval_batch_size": self.eval_batch_size,
            "average": self.average,
        }

    @classmethod
    def from_jsonable(cls, data: dict) -> "TrainRunConfig":
        kwargs = dict(data)
        if "split_fractions" in kwargs:
            kwargs["split_fractions"] = tuple(kwargs["split_fractions"])
        return cls(**kwargs)


def minibatch_indices(indices: np.ndarray, batch_size: int, gen: np.random.Generator):
    """Shuffled minibatch index slices; the short final batch is kept."""
    perm = indices[gen.permutation(len(indices))]
    return [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]


def _batch_from(dataset: Dataset, idx: np.ndarray) -> Batch:
    return Batch(
        traj=dataset.traj[idx],
        mask=dataset.mask[idx],
        cat=dataset.cat[idx],
        num=dataset.num[idx],
        mode=dataset.mode[idx],
        purpose=dataset.purpose[idx],
    )


def evaluate(cfg: NetworkConfig, weights: NetworkWeights, dataset: Dataset,
             indices: np.ndarray, batch_size: int = 256, threads: int = 1):
    """Confusion matrix per head over the given records, in inference mode.

    Shards may be evaluated in parallel; partial matrices merge by shard
    index so the result does not depend on completion order.
    """
    shards = [indices[i : i + batch_size] for i in range(0, len(indices), batch_size)]
    cms = {head: metrics.ConfusionMatrix(cfg.classes_for(head)) for head in cfg.head_names}

    def run_shard(shard):
        batch = _batch_from(dataset, shard)
        preds = network.predict(cfg, weights, batch)
        out = {}
        for head in cfg.head_names:
            labels = batch.labels_for(head)
            have = labels >= 0
            cm = metrics.ConfusionMatrix(cfg.classes_for(head))
            if have.any():
                cm.add(labels[have], preds[head][have])
            out[head] = cm
        return out

    if threads > 1 and len(shards) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_shard, shards))
    else:
        results = [run_shard(s) for s in shards]
    for partial in results:
        for head, cm in partial.items():
            cms[head].merge(cm)
    return cms


LOG_COLUMNS = ("epoch", "task", "split", "accuracy", "precision", "recall", "f1")


def format_log_row(row: dict) -> str:
    return "\t".join(
        [str(row["epoch"]), row["task"], row["split"]]
        + [f"{row[c]:.6f}" for c in ("accuracy", "precision", "recall", "f1")]
    )


@dataclass
class TrainResult:
    weights: NetworkWeights
    optimizer_state: dict
    next_epoch: int
    log_rows: list = field(default_factory=list)
    epoch_train_loss: list = field(default_factory=list)
    report_snapshot: NetworkWeights | None = None
    best_snapshot: NetworkWeights | None = None
    best_f1: float = -1.0
    best_epoch: int = -1


def clone_weights(weights: NetworkWeights) -> NetworkWeights:
    clone = NetworkWeights(weights.cfg, weights.schema, weights.numeric_features, weights.seed)
    src, dst = weights.params(), clone.params()
    for k in src:
        dst[k].value[...] = src[k].value
    return clone


def train(run_cfg: TrainRunConfig, net_cfg: NetworkConfig, dataset: Dataset,
          resume: TrainResult | None = None, threads: int = 1,
          adam_kwargs: dict | None = None) -> TrainResult:
    """Minibatch training with per-epoch evaluation of both splits.

    Training examples must carry every label the configured heads need, so
    multi-task training uses only records validated for both tasks. Resuming
    from a returned TrainResult continues the exact trajectory of the
    uninterrupted run (shuffles and dropout draws are keyed by absolute
    epoch, and the optimizer state rides along).
    """
    required = net_cfg.head_names
    train_idx = dataset.indices("train", require=required)
    test_idx = dataset.indices("test", require=required)
    if len(train_idx) == 0:
        raise ContractError("training split is empty after label filtering")

    if resume is not None:
        weights = resume.weights
        start_epoch = resume.next_epoch
        result = resume
    else:
        weights = NetworkWeights(net_cfg, dataset.schema, dataset.num.shape[1], run_cfg.seed)
        start_epoch = 0
        result = TrainResult(weights=weights, optimizer_state={}, next_epoch=0)

    params = weights.params()
    adam = Adam(params, **(adam_kwargs or {}))
    if resume is not None and resume.optimizer_state:
        adam.load_state(resume.optimizer_state)

    spec = LossSpec(net_cfg.loss_weight_mode, net_cfg.loss_weight_purpose)
    active_heads = [h for h in net_cfg.head_names if net_cfg.loss_weight(h) > 0.0]

    for epoch in range(start_epoch, start_epoch + run_cfg.epochs):
        shuffle = rng.stream(run_cfg.seed, f"shuffle.{epoch}")
        batches = minibatch_indices(train_idx, run_cfg.batch_size, shuffle)
        epoch_loss = 0.0
        for b, idx in enumerate(batches):
            batch = _batch_from(dataset, idx)
            dropout = DropoutStreams(run_cfg.seed, scope=f"dropout.{epoch}.{b}")
            probs, cache = network.forward(net_cfg, weights, batch, training=True, dropout=dropout)
            head_losses, d_logits = {}, {}
            for head in net_cfg.head_names:
                losses, dlog = cross_entropy(probs[head], batch.labels_for(head))
                head_losses[head] = float(losses.mean())
                if head in active_heads:
                    d_logits[head] = dlog * (spec.weight(head) / len(batch))
            loss = multitask_loss(spec, head_losses)
            epoch_loss += loss
            weights.zero_grads()
            network.backward(net_cfg, weights, cache, d_logits)
            adam.step()
        result.epoch_train_loss.append(epoch_loss / max(len(batches), 1))

        epoch_f1 = []
        for split_name, idx in (("train", train_idx), ("test", test_idx)):
            if len(idx) == 0:
                continue
            cms = evaluate(net_cfg, weights, dataset, idx, run_cfg.eval_batch_size, threads)
            for head in net_cfg.head_names:
                report = metrics.MetricsReport.from_confusion(
                    cms[head], task=head, learner="", model=net_cfg.cell,
                    epoch=epoch + 1, split=split_name, average=run_cfg.average,
                )
                result.log_rows.append(
                    {
                        "epoch": epoch + 1,
                        "task": head,
                        "split": split_name,
                        "accuracy": report.accuracy,
                        "precision": report.precision,
                        "recall": report.recall,
                        "f1": report.f1,
                    }
                )
                if split_name == "test":
                    epoch_f1.append(report.f1)
        if epoch_f1:
            mean_f1 = float(np.mean(epoch_f1))
            if mean_f1 > result.best_f1:
                result.best_f1 = mean_f1
                result.best_epoch = epoch + 1
                result.best_snapshot = clone_weights(weights)
        if epoch + 1 == run_cfg.report_epoch:
            result.report_snapshot = clone_weights(weights)

    result.optimizer_state = adam.state_dict()
    result.next_epoch = start_epoch + run_cfg.epochs
    return result


# --- gradient checking ---------------------------------------------------------


def numeric_grad(f, x: np.ndarray, step: float = 1e-5, entries=None) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. x, perturbing x in
    place and restoring it. entries selects flat indices (default: all)."""
    if entries is None:
        entries = range(x.size)
    flat = x.ravel()
    grad = np.zeros(len(entries))
    for j, i in enumerate(entries):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f()
        flat[i] = orig - step
        f_minus = f()
        flat[i] = orig
        grad[j] = (f_plus - f_minus) / (2.0 * step)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Normwise relative error between two gradient blocks."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    denom = max(na, nb, 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@dataclass(frozen=True)
class BlockCheck:
    name: str
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tolerance


def check_params(full_pass, loss_only, params: dict, tolerance: float,
                 step: float = 1e-5, max_entries: int | None = None,
                 seed: int = 0) -> list[BlockCheck]:
    """Compare analytic gradients against central finite differences.

    full_pass() runs forward+backward (after zeroing grads) and returns the
    loss; loss_only() runs the identical forward and returns the loss without
    touching gradients. Large blocks are subsampled to max_entries entries.
    """
    full_pass()
    analytic = {k: p.grad.copy() for k, p in params.items()}
    pick = rng.stream(seed, "gradcheck.entries")
    results = []
    for name, p in params.items():
        x = p.value
        if max_entries is not None and x.size > max_entries:
            entries = np.sort(pick.choice(x.size, size=max_entries, replace=False))
        else:
            entries = np.arange(x.size)
        fd = numeric_grad(loss_only, x, step, entries=entries)
        an = analytic[name].ravel()[entries]
        results.append(BlockCheck(name, rel_error(an, fd), tolerance))
    return results


def toy_gradcheck_config(cell: str = "bi_gru") -> NetworkConfig:
    return NetworkConfig(
        cell=cell,
        recurrent_layers=2,
        recurrent_width=5,
        recurrent_dropout=0.2,
        numeric_widths=(6,),
        fused_widths=(7,),
        trunk_widths=(6,),
        trunk_dropout=0.5,
        heads="both",
        mode_classes=4,
        purpose_classes=6,
    )


def toy_batch(schema, n_numeric: int, batch: int = 3, seed: int = 7,
              max_len: int = 8) -> Batch:
    """Small random batch with ragged valid lengths for gradient checks."""
    gen = rng.stream(seed, "gradcheck.batch")
    T = network.TRAJECTORY_LEN
    traj = gen.normal(size=(batch, T, network.TRAJECTORY_FEATURES)) * 0.5
    lengths = gen.integers(3, max_len + 1, size=batch)
    mask = np.arange(T)[None, :] < lengths[:, None]
    traj[~mask] = 0.0
    cat = np.stack(
        [gen.integers(0, a.cardinality, size=batch) for a in schema.attributes], axis=1
    )
    num = gen.normal(size=(batch, n_numeric))
    mode = gen.integers(0, 4, size=batch)
    purpose = gen.integers(0, 6, size=batch)
    return Batch(traj=traj, mask=mask, cat=cat, num=num, mode=mode, purpose=purpose)


def network_grad_check(net_cfg: NetworkConfig, schema, n_numeric: int = 5,
                       tolerance: float = 1e-4, seed: int = 11,
                       max_entries: int = 30) -> list[BlockCheck]:
    """Finite-difference check of the full graph under frozen dropout."""
    weights = NetworkWeights(net_cfg, schema, n_numeric, seed)
    batch = toy_batch(schema, n_numeric, seed=seed)
    spec = LossSpec(net_cfg.loss_weight_mode, net_cfg.loss_weight_purpose)
    frozen = FrozenDropout(DropoutStreams(seed, scope="gradcheck"))

    def losses_and_grads(with_backward: bool) -> float:
        frozen.rewind()
        probs, cache = network.forward(net_cfg, weights, batch, training=True, dropout=frozen)
        head_losses, d_logits = {}, {}
        for head in net_cfg.head_names:
            losses, dlog = cross_entropy(probs[head], batch.labels_for(head))
            head_losses[head] = float(losses.mean())
            if spec.weight(head) > 0:
                d_logits[head] = dlog * (spec.weight(head) / len(batch))
        if with_backward:
            network.backward(net_cfg, weights, cache, d_logits)
        return multitask_loss(spec, head_losses)

    def full_pass():
        weights.zero_grads()
        return losses_and_grads(True)

    return check_params(
        full_pass, lambda: losses_and_grads(False), weights.params(),
        tolerance, max_entries=max_entries, seed=seed,
    )


def _make_stack(kind: str, layers: int, input_size: int, hidden: int, seed: int):
    def rng_for(name):
        return rng.stream(seed, f"gradcheck.{kind}.{name}")

    def make_layer(index, in_size):
        base = kind.removeprefix("bi_")
        factory = {
            "rnn": cells.RnnCell.create,
            "lstm": cells.LstmCell.create,
            "gru": cells.GruCell.create,
        }[base]

        def cell_for(tag):
            return factory(in_size, hidden, lambda leaf: rng_for(f"l{index}.{tag}{leaf}"))

        if kind.startswith("bi_"):
            return cells.BidirectionalLayer(cell_for("fwd."), cell_for("bwd."))
        return cells.RecurrentLayer(cell_for(""))

    out, in_size = [], input_size
    for i in range(layers):
        layer = make_layer(i, in_size)
        out.append(layer)
        in_size = layer.width
    return cells.RecurrentStack(out, dropout_rate=0.0, name=f"gc.{kind}")


def cell_grad_check(kind: str, tolerance: float = 1e-4, seed: int = 3,
                    T: int = 5, hidden: int = 4, input_size: int = 3,
                    layers: int = 1, batch: int = 2) -> list[BlockCheck]:
    """BPTT check for one cell kind (or its bidirectional wrapper) through a
    masked unrolled stack; loss probes the final states."""
    gen = rng.stream(seed, f"gradcheck.cell.{kind}")
    stack = _make_stack(kind, layers, input_size, hidden, seed)
    inputs = [gen.normal(size=(batch, input_size)) for _ in range(T)]
    lengths = gen.integers(2, T + 1, size=batch)
    mask = np.arange(T)[:, None] < lengths[None, :]
    probe = gen.normal(size=(batch, stack.width))
    params = stack.params()

    def run(with_backward: bool) -> float:
        state = stack.forward(inputs, mask, training=True, dropout=None)
        loss = float((state.top.final * probe).sum())
        if with_backward:
            stack.backward(state, [None] * T, d_top_final=probe)
        return loss

    def full_pass():
        for p in params.values():
            p.zero_grad()
        return run(True)

    return check_params(full_pass, lambda: run(False), params, tolerance, seed=seed)


def embedding_grad_check(tolerance: float = 1e-6, seed: int = 5) -> list[BlockCheck]:
    schema = make_schema([("a", 3, 2), ("b", 4, 3)])
    tables = EmbeddingTables.create(schema, lambda name: rng.stream(seed, f"gc.embed.{name}"))
    gen = rng.stream(seed, "gc.embed.codes")
    codes = np.stack([gen.integers(0, 3, size=6), gen.integers(0, 4, size=6)], axis=1)
    probe = gen.normal(size=(6, schema.output_width))
    params = tables.params("gc")

    def run(with_backward: bool) -> float:
        out, cache = embed(tables, codes)
        if with_backward:
            embed_backward(tables, cache, probe)
        return float((out * probe).sum())

    def full_pass():
        for p in params.values():
            p.zero_grad()
        return run(True)

    return check_params(full_pass, lambda: run(False), params, tolerance, seed=seed)


def op_grad_checks(tolerance: float = 1e-6, seed: int = 1) -> list[BlockCheck]:
    """Finite-difference checks for the kernel-level ops."""
    gen = rng.stream(seed, "gc.ops")
    results = []

    def probe_check(name, params, forward_backward, forward_only):
        def full_pass():
            for p in params.values():
                p.zero_grad()
            return forward_backward()

        results.extend(check_params(full_pass, forward_only, params, tolerance, seed=seed))

    A = tensor.Param(gen.uniform(-2, 2, size=(4, 3)))
    B = tensor.Param(gen.uniform(-2, 2, size=(3, 5)))
    probe = gen.normal(size=(4, 5))

    def matmul_fb():
        out = tensor.matmul(A.value, B.value)
        da, db = tensor.matmul_backward(probe, A.value, B.value)
        A.grad += da
        B.grad += db
        return float((out * probe).sum())

    probe_check(
        "matmul", {"matmul.A": A, "matmul.B": B}, matmul_fb,
        lambda: float((tensor.matmul(A.value, B.value) * probe).sum()),
    )

    for op in ("add", "sub", "mul"):
        X = tensor.Param(gen.uniform(-2, 2, size=(3, 4)))
        Y = tensor.Param(gen.uniform(-2, 2, size=(3, 4)))
        pr = gen.normal(size=(3, 4))

        def fb(op=op, X=X, Y=Y, pr=pr):
            out = tensor.ewise(op, X.value, Y.value)
            dx, dy = tensor.ewise_backward(op, pr, X.value, Y.value)
            X.grad += dx
            Y.grad += dy
            return float((out * pr).sum())

        probe_check(
            op, {f"ewise.{op}.a": X, f"ewise.{op}.b": Y}, fb,
            lambda op=op, X=X, Y=Y, pr=pr: float((tensor.ewise(op, X.value, Y.value) * pr).sum()),
        )

    X = tensor.Param(gen.uniform(-2, 2, size=(3, 4)))
    Y = tensor.Param(gen.uniform(-2, 2, size=(1, 4)))  # broadcast bias row
    pr_bias = gen.normal(size=(3, 4))

    def bias_fb():
        out = tensor.ewise("add", X.value, Y.value)
        dx, dy = tensor.ewise_backward("add", pr_bias, X.value, Y.value)
        X.grad += dx
        Y.grad += dy
        return float((out * pr_bias).sum())

    probe_check(
        "bias", {"ewise.bias.a": X, "ewise.bias.b": Y}, bias_fb,
        lambda: float((tensor.ewise("add", X.value, Y.value) * pr_bias).sum()),
    )

    for kind in ("sigmoid", "tanh", "relu", "leaky_relu", "softmax_rows"):
        Z = tensor.Param(gen.uniform(-2, 2, size=(3, 4)))
        if kind in ("relu", "leaky_relu"):
            # keep entries away from the kink so finite differences are valid
            Z.value[np.abs(Z.value) < 0.05] += 0.1
        pr_act = gen.normal(size=(3, 4))

        def act_fb(kind=kind, Z=Z, pr_act=pr_act):
            out = activate(kind, Z.value)
            Z.grad += activate_backward(kind, pr_act, x=Z.value, out=out)
            return float((out * pr_act).sum())

        probe_check(
            kind, {f"activate.{kind}": Z}, act_fb,
            lambda kind=kind, Z=Z, pr_act=pr_act: float((activate(kind, Z.value) * pr_act).sum()),
        )
    return results


def grad_check(net_cfg: NetworkConfig | None = None, schema=None,
               network_tolerance: float = 1e-4, op_tolerance: float = 1e-6,
               seed: int = 11) -> list[BlockCheck]:
    """The full gradient-fidelity suite: kernel ops, each cell kind, the
    bidirectional wrapper, 2- and 3-layer stacks, the embedding layer and
    the whole toy graph under frozen dropout."""
    results = op_grad_checks(op_tolerance, seed=seed)
    results += embedding_grad_check(op_tolerance, seed=seed)
    for kind in ("rnn", "lstm", "gru", "bi_gru"):
        results += [
            replace(r, name=f"cell.{kind}.{r.name}")
            for r in cell_grad_check(kind, network_tolerance, seed=seed)
        ]
    for depth in (2, 3):
        results += [
            replace(r, name=f"stack{depth}.{r.name}")
            for r in cell_grad_check("gru", network_tolerance, seed=seed, layers=depth, T=4)
        ]
    if net_cfg is None:
        net_cfg = toy_gradcheck_config()
    if schema is None:
        schema = make_schema([("kappa", 3, 2), ("lam", 5, 3)])
    results += [
        replace(r, name=f"network.{r.name}")
        for r in network_grad_check(net_cfg, schema, tolerance=network_tolerance, seed=seed)
    ]
    return results
