"""Synchronous federated training loop.

One round: select clients, broadcast the current model (full, or a
random sub-network under federated dropout), run one epoch of local SGD
per client, aggregate by sample-count-weighted averaging, account every
transmitted scalar at 4 bytes. The staged methods additionally consult
the switching policy each round and grow the model in place with
function-preserving transforms.

Methods:
  fedavg  - final model broadcast in full every round
  fd      - final model, random sub-network broadcast per round
  fnn     - staged growing, full broadcast
  fnn-fd  - staged growing, sub-network broadcast except on the first
            ``fd_exempt_prefix`` (smallest) models
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn, rng as rngmod
from .errors import ConfigError, NumericalError, TransformError
from .growth import GrowthSchedule, schedule_diffs
from .morph import apply_diff
from .switching import SwitchPolicy

BYTES_PER_SCALAR = 4  # float32 on the wire

METHODS = ("fedavg", "fd", "fnn", "fnn-fd")


# ---------------------------------------------------------------------------
# Client data


@dataclass
class ClientShard:
    """One client's private samples; ``n`` is its aggregation weight."""

    client_id: int
    samples: np.ndarray
    labels: np.ndarray

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    def __post_init__(self):
        if self.samples.shape[0] < 1:
            raise ConfigError(f"client {self.client_id}: empty shard")
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ConfigError(f"client {self.client_id}: {self.samples.shape[0]} samples "
                              f"vs {self.labels.shape[0]} labels")


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a dataset across simulated clients."""

    scheme: str = "iid-uniform"
    client_count: int = 100
    shards_per_client: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("iid-uniform", "label-shard-non-iid"):
            raise ConfigError(f"unknown partition scheme {self.scheme!r}")
        if self.client_count < 1:
            raise ConfigError("client count must be >= 1")
        if self.shards_per_client < 1:
            raise ConfigError("shards per client must be >= 1")


def partition(samples: np.ndarray, labels: np.ndarray,
              spec: PartitionSpec) -> list[ClientShard]:
    """Split a dataset into disjoint, exhaustive client shards."""
    n = samples.shape[0]
    if n == 0:
        raise ConfigError("cannot partition an empty dataset")
    if spec.client_count > n:
        raise ConfigError(f"more clients ({spec.client_count}) than samples ({n})")
    rng = rngmod.stream(spec.seed, rngmod.DATA)
    if spec.scheme == "iid-uniform":
        order = rng.permutation(n)
        pieces = np.array_split(order, spec.client_count)
    else:
        pieces = _label_shard_pieces(labels, spec, rng)
    shards = [ClientShard(cid, samples[idx], labels[idx])
              for cid, idx in enumerate(pieces)]
    return shards


def _label_shard_pieces(labels, spec, rng):
    """Label-pure shards dealt randomly: each client receives
    ``shards_per_client`` shards, so it sees at most that many labels."""
    classes = np.unique(labels)
    total_shards = spec.client_count * spec.shards_per_client
    if len(classes) > total_shards:
        raise ConfigError(f"{len(classes)} labels need at least {len(classes)} shards, "
                          f"got {total_shards}")
    counts = np.array([(labels == c).sum() for c in classes], dtype=np.int64)
    # Proportional allocation, minimum one shard per label, remainders to the
    # largest fractional parts.
    raw = counts / counts.sum() * total_shards
    alloc = np.maximum(1, np.floor(raw).astype(int))
    while alloc.sum() > total_shards:
        alloc[np.argmax(alloc)] -= 1
    remainder = raw - np.floor(raw)
    while alloc.sum() < total_shards:
        i = int(np.argmax(remainder))
        alloc[i] += 1
        remainder[i] = -1
    pool = []
    for c, k in zip(classes, alloc):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        pool.extend(np.array_split(idx, k))
    order = rng.permutation(len(pool))
    pieces = []
    for cid in range(spec.client_count):
        take = order[cid * spec.shards_per_client:(cid + 1) * spec.shards_per_client]
        pieces.append(np.concatenate([pool[s] for s in take]))
    return pieces


def select_clients(rng: np.random.Generator, population: int, m: int) -> list[int]:
    """m distinct client ids, uniform without replacement."""
    if m > population:
        raise ConfigError(f"cannot select {m} of {population} clients")
    return sorted(int(c) for c in rng.choice(population, size=m, replace=False))


# ---------------------------------------------------------------------------
# Local training and aggregation


def local_train(arch: nn.ModelArch, params: nn.Params, shard: ClientShard,
                cfg: nn.TrainConfig, rng: np.random.Generator):
    """Local epochs of minibatch SGD on one client's shard.

    Returns (updated params, mean per-sample loss, shard size).
    """
    cur = nn.copy_params(params)
    loss_sum, seen = 0.0, 0
    try:
        for _ in range(cfg.local_epochs):
            order = rng.permutation(shard.n)
            for start in range(0, shard.n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                cur, loss = nn.backward_and_step(
                    arch, cur, shard.samples[idx], shard.labels[idx], cfg, rng)
                loss_sum += loss * len(idx)
                seen += len(idx)
    except NumericalError as e:
        raise NumericalError(f"client {shard.client_id}: {e}") from e
    return cur, loss_sum / seen, shard.n


def weighted_round_loss(losses_and_counts) -> float:
    """Sample-count-weighted mean of the clients' local mean losses."""
    pairs = list(losses_and_counts)
    total = sum(n for _, n in pairs)
    if total <= 0:
        raise ConfigError("weighted loss needs a positive total sample count")
    return math.fsum(loss * n for loss, n in pairs) / total


def aggregate(updates: list[tuple[nn.Params, int]]) -> nn.Params:
    """Sample-count-weighted mean of client parameters.

    Accumulates in float64 with a fixed (list) order and rounds to
    float32 once, so a single update (or identical updates) comes back
    bit-exact and the result is deterministic for a given order.
    """
    if not updates:
        raise ConfigError("aggregate needs at least one update")
    keys = set(updates[0][0].keys())
    for p, _ in updates[1:]:
        if set(p.keys()) != keys:
            raise ConfigError("aggregate: updates have different layer sets")
    total = float(sum(n for _, n in updates))
    if total <= 0:
        raise ConfigError("aggregate: total sample count must be positive")
    out: nn.Params = {}
    for i in keys:
        shape_w = updates[0][0][i].w.shape
        shape_b = updates[0][0][i].b.shape
        acc_w = np.zeros(shape_w, dtype=np.float64)
        acc_b = np.zeros(shape_b, dtype=np.float64)
        for p, n in updates:
            if p[i].w.shape != shape_w or p[i].b.shape != shape_b:
                raise ConfigError(f"aggregate: layer {i} shape mismatch across updates")
            acc_w += float(n) * p[i].w.astype(np.float64)
            acc_b += float(n) * p[i].b.astype(np.float64)
        out[i] = nn.LayerParams((acc_w / total).astype(nn.DTYPE),
                                (acc_b / total).astype(nn.DTYPE))
    return out


# ---------------------------------------------------------------------------
# Federated dropout


@dataclass(frozen=True)
class DropoutMask:
    """Kept output indices per maskable trainable layer.

    Layers absent from ``kept`` (the final classifier) keep every output.
    Index arrays are sorted and unique.
    """

    kept: dict[int, np.ndarray]
    keep_fraction: float


def _in_index(arch: nn.ModelArch, layer: int, kept: dict[int, np.ndarray],
              prev_map: dict[int, int]):
    """Input index array of ``layer`` in the full model's input coordinates,
    or None when the full input is kept."""
    prev = prev_map.get(layer)
    if prev is None or prev not in kept:
        return None
    spec = arch.layers[layer]
    prev_width = _out_width(arch.layers[prev])
    in_full = spec.kernel.i if spec.kind == "conv2d" else spec.in_units
    ratio = in_full // prev_width  # spatial positions per channel across flatten
    kp = kept[prev]
    if spec.kind == "conv2d" or ratio == 1:
        return kp
    return (np.arange(ratio)[:, None] * prev_width + kp[None, :]).ravel()


def _out_width(spec: nn.LayerSpec) -> int:
    return spec.kernel.o if spec.kind == "conv2d" else spec.out_units


def _prev_trainable_map(arch: nn.ModelArch) -> dict[int, int]:
    prev_map: dict[int, int] = {}
    prev = None
    for i in nn.trainable_indices(arch):
        if prev is not None:
            prev_map[i] = prev
        prev = i
    return prev_map


def fd_extract(arch: nn.ModelArch, params: nn.Params, keep_fraction: float,
               rng: np.random.Generator):
    """Random sub-network for broadcasting.

    Keeps floor(width * keep_fraction) units/filters in every hidden
    trainable layer (the classifier is exempt) and crops adjacent
    weights consistently. Returns (sub_arch, sub_params, mask).
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError(f"keep fraction must be in (0, 1], got {keep_fraction}")
    trainables = nn.trainable_indices(arch)
    kept: dict[int, np.ndarray] = {}
    for i in trainables[:-1]:
        width = _out_width(arch.layers[i])
        count = int(math.floor(width * keep_fraction))
        if count == 0:
            raise ConfigError(
                f"layer {i}: keep fraction {keep_fraction} keeps zero of {width} units")
        if count == width:
            kept[i] = np.arange(width)
        else:
            kept[i] = np.sort(rng.choice(width, size=count, replace=False))
    mask = DropoutMask(kept, keep_fraction)
    sub_arch, sub_params = _crop_model(arch, params, mask)
    return sub_arch, sub_params, mask


def _crop_model(arch: nn.ModelArch, params: nn.Params, mask: DropoutMask):
    prev_map = _prev_trainable_map(arch)
    layers = list(arch.layers)
    sub_params: nn.Params = {}
    for i in nn.trainable_indices(arch):
        spec = arch.layers[i]
        p = params[i]
        w, b = p.w, p.b
        in_idx = _in_index(arch, i, mask.kept, prev_map)
        if in_idx is not None:
            w = w[:, :, in_idx, :] if spec.kind == "conv2d" else w[in_idx, :]
        out_idx = mask.kept.get(i)
        if out_idx is not None:
            w = w[..., out_idx]
            b = b[out_idx]
        sub_params[i] = nn.LayerParams(np.ascontiguousarray(w), b.copy())
        if spec.kind == "conv2d":
            k = spec.kernel
            layers[i] = nn.conv2d(nn.KernelShape(k.w, k.h, w.shape[2], w.shape[3]),
                                  spec.padding, spec.stride)
        else:
            layers[i] = nn.dense(w.shape[0], w.shape[1])
    sub_arch = arch.with_layers(layers)
    nn.validate_arch(sub_arch)
    return sub_arch, sub_params


def fd_merge(arch: nn.ModelArch, global_params: nn.Params,
             updates: list[tuple[nn.Params, DropoutMask, int]]) -> nn.Params:
    """Fold sub-network updates back into the global model.

    Every position covered by at least one client becomes the
    sample-count-weighted mean of its covering clients; uncovered
    positions keep the global value. Accumulation matches ``aggregate``
    (float64, list order, rounded once), so with a shared mask the two
    agree exactly on the masked region.
    """
    if not updates:
        raise ConfigError("fd_merge needs at least one update")
    prev_map = _prev_trainable_map(arch)
    merged: nn.Params = {}
    for i in nn.trainable_indices(arch):
        g = global_params[i]
        acc_w = np.zeros(g.w.shape, dtype=np.float64)
        cov_w = np.zeros(g.w.shape, dtype=np.float64)
        acc_b = np.zeros(g.b.shape, dtype=np.float64)
        cov_b = np.zeros(g.b.shape, dtype=np.float64)
        for sub, mask, n in updates:
            spec = arch.layers[i]
            in_idx = _in_index(arch, i, mask.kept, prev_map)
            out_idx = mask.kept.get(i)
            sw = sub[i].w
            expect_in = len(in_idx) if in_idx is not None else \
                (spec.kernel.i if spec.kind == "conv2d" else spec.in_units)
            expect_out = len(out_idx) if out_idx is not None else _out_width(spec)
            in_axis = 2 if spec.kind == "conv2d" else 0
            if sw.shape[in_axis] != expect_in or sw.shape[-1] != expect_out or \
                    sub[i].b.shape[0] != expect_out:
                raise ConfigError(
                    f"fd_merge: layer {i} update shape {sw.shape} inconsistent "
                    f"with its mask")
            wsel = _index_expr(spec, in_idx, out_idx)
            wt = float(n)
            acc_w[wsel] += wt * sw.astype(np.float64)
            cov_w[wsel] += wt
            bsel = out_idx if out_idx is not None else slice(None)
            acc_b[bsel] += wt * sub[i].b.astype(np.float64)
            cov_b[bsel] += wt
        covered_w = cov_w > 0
        covered_b = cov_b > 0
        new_w = g.w.copy()
        new_b = g.b.copy()
        new_w[covered_w] = (acc_w[covered_w] / cov_w[covered_w]).astype(nn.DTYPE)
        new_b[covered_b] = (acc_b[covered_b] / cov_b[covered_b]).astype(nn.DTYPE)
        merged[i] = nn.LayerParams(new_w, new_b)
    return merged


def _index_expr(spec, in_idx, out_idx):
    if spec.kind == "conv2d":
        if in_idx is None and out_idx is None:
            return (slice(None),)
        if in_idx is None:
            return (slice(None), slice(None), slice(None), out_idx)
        if out_idx is None:
            return (slice(None), slice(None), in_idx, slice(None))
        return (slice(None), slice(None)) + np.ix_(in_idx, out_idx)
    if in_idx is None and out_idx is None:
        return (slice(None),)
    if in_idx is None:
        return (slice(None), out_idx)
    if out_idx is None:
        return (in_idx, slice(None))
    return np.ix_(in_idx, out_idx)


# ---------------------------------------------------------------------------
# Evaluation, accounting, the round loop


def evaluate(arch: nn.ModelArch, params: nn.Params, samples: np.ndarray,
             labels: np.ndarray, batch_size: int = 512) -> float:
    """Top-1 accuracy in eval mode; deterministic for fixed inputs."""
    hits = 0
    for start in range(0, samples.shape[0], batch_size):
        probs = nn.forward(arch, params, samples[start:start + batch_size])
        hits += int((probs.argmax(axis=1) ==
                     labels[start:start + batch_size]).sum())
    return hits / samples.shape[0]


@dataclass
class LedgerRow:
    round: int
    model_index: int
    clients: int
    download_bytes: int
    upload_bytes: int
    cumulative_bytes: int
    flops_per_client: int


@dataclass
class CommLedger:
    """Per-round communication and computation accounting."""

    rows: list[LedgerRow] = field(default_factory=list)

    def add(self, round_idx: int, model_index: int, clients: int,
            down_scalars: int, up_scalars: int, flops_per_client: int) -> LedgerRow:
        down = down_scalars * BYTES_PER_SCALAR
        up = up_scalars * BYTES_PER_SCALAR
        prev = self.rows[-1].cumulative_bytes if self.rows else 0
        row = LedgerRow(round_idx, model_index, clients, down, up,
                        prev + down + up, flops_per_client)
        self.rows.append(row)
        return row

    @property
    def total_bytes(self) -> int:
        return self.rows[-1].cumulative_bytes if self.rows else 0

    def recompute_cumulative(self) -> list[int]:
        """Independent re-derivation of the cumulative column from the
        per-round columns (consistency oracle)."""
        total, out = 0, []
        for row in self.rows:
            total += row.download_bytes + row.upload_bytes
            out.append(total)
        return out


@dataclass
class RoundMetrics:
    round: int
    model_index: int
    weighted_loss: float
    test_accuracy: float | None
    signal: float | None
    switched: bool
    download_bytes: int
    upload_bytes: int
    cumulative_bytes: int
    flops_per_client: int


@dataclass
class SwitchEvent:
    round: int
    from_index: int
    to_index: int
    signal: float
    accuracy_before: float | None
    accuracy_after: float | None


@dataclass(frozen=True)
class RunSettings:
    """Knobs of one simulated run (independent of dataset and schedule)."""

    rounds: int
    clients_per_round: int
    train: nn.TrainConfig
    master_seed: int = 0
    eval_every: int = 50
    switch_window: int = 100
    switch_lag: int = 300
    fd_keep_fraction: float | None = None  # None -> 1 - dropout rate
    fd_exempt_prefix: int = 2
    init_scheme: str = "truncnorm"

    def keep_fraction(self) -> float:
        if self.fd_keep_fraction is not None:
            return self.fd_keep_fraction
        return 1.0 - self.train.dropout_rate


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    ledger: CommLedger
    events: list[SwitchEvent]
    final_arch: nn.ModelArch
    final_params: nn.Params
    final_model_index: int


def run_experiment(method: str, schedule: GrowthSchedule,
                   shards: list[ClientShard],
                   test_samples: np.ndarray | None,
                   test_labels: np.ndarray | None,
                   settings: RunSettings,
                   on_round=None) -> RunResult:
    """Execute a full multi-round run of one method.

    ``on_round`` (optional) receives each RoundMetrics as it completes,
    so callers can stream partial results before a failure.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    if settings.clients_per_round > len(shards):
        raise ConfigError(f"clients per round {settings.clients_per_round} exceeds "
                          f"population {len(shards)}")
    seed = settings.master_seed
    staged = method in ("fnn", "fnn-fd")
    if staged:
        model_index = 0
        diffs = schedule_diffs(schedule)
    else:
        model_index = schedule.num_models - 1
    arch = schedule.models[model_index]
    params = nn.init_params(arch, rngmod.stream(seed, rngmod.INIT), settings.init_scheme)
    policy = SwitchPolicy(settings.switch_window, settings.switch_lag,
                          model_index=model_index)
    can_eval = test_samples is not None and test_samples.shape[0] > 0

    metrics: list[RoundMetrics] = []
    ledger = CommLedger()
    events: list[SwitchEvent] = []

    for r in range(settings.rounds):
        try:
            sel = select_clients(rngmod.stream(seed, rngmod.SELECT, r),
                                 len(shards), settings.clients_per_round)
            use_fd = method == "fd" or (
                method == "fnn-fd" and model_index >= settings.fd_exempt_prefix)
            keep = settings.keep_fraction() if use_fd else 1.0
            if use_fd and keep < 1.0:
                bc_arch, bc_params, mask = fd_extract(
                    arch, params, keep, rngmod.stream(seed, rngmod.FD_MASK, r))
            else:
                bc_arch, bc_params, mask = arch, params, None
            scalars = nn.count_params(bc_arch)

            updates = []
            for cid in sel:
                crng = rngmod.stream(seed, rngmod.CLIENT, r, cid)
                updates.append(local_train(bc_arch, bc_params, shards[cid],
                                           settings.train, crng))
            if mask is None:
                params = aggregate([(p, n) for p, _, n in updates])
            else:
                params = fd_merge(arch, params,
                                  [(p, mask, n) for p, _, n in updates])

            total_n = sum(n for _, _, n in updates)
            wloss = weighted_round_loss((loss, n) for _, loss, n in updates)
            policy.record_round_loss(wloss)
            signal = policy.progress_signal()

            trained_index = model_index
            switched = False
            acc_before = acc_after = None
            if staged and policy.should_switch(schedule):
                if can_eval:
                    acc_before = evaluate(arch, params, test_samples, test_labels)
                arch, params, _ = apply_diff(
                    arch, params, diffs[model_index],
                    rngmod.stream(seed, rngmod.SWITCH, model_index))
                if can_eval:
                    acc_after = evaluate(arch, params, test_samples, test_labels)
                events.append(SwitchEvent(r, model_index, model_index + 1,
                                          signal, acc_before, acc_after))
                model_index += 1
                policy.advance()
                switched = True

            accuracy = None
            if can_eval and settings.eval_every > 0 and \
                    (r + 1) % settings.eval_every == 0:
                accuracy = evaluate(arch, params, test_samples, test_labels)

            # Accounting reports the model trained this round (pre-switch).
            mean_n = total_n / len(sel)
            flops = int(nn.fwd_bwd_flops(bc_arch) * mean_n)
            lrow = ledger.add(r, trained_index, len(sel),
                              scalars * len(sel), scalars * len(sel), flops)
            row = RoundMetrics(r, trained_index, wloss, accuracy, signal,
                               switched, lrow.download_bytes, lrow.upload_bytes,
                               lrow.cumulative_bytes, lrow.flops_per_client)
            metrics.append(row)
            if on_round is not None:
                on_round(row)
        except (NumericalError, ConfigError, TransformError) as e:
            raise type(e)(f"round {r}: {e}") from e
    return RunResult(metrics, ledger, events, arch, params, model_index)
