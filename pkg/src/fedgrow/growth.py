"""Staged model schedules: ordered architectures, switch thresholds, diffs.

A schedule is an ordered list of strictly growing architectures plus one
switch threshold per consecutive pair. The builtin schedules cover three
image benchmarks; custom schedules load from a JSON file with the same
shape (see ``schedule_from_dict`` for the format).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from . import nn
from .errors import ConfigError, ScheduleError

# Switch thresholds, learning rates and clients per round for the builtin
# benchmark setups.
THRESHOLDS = {
    "emnist": (0.08, 0.04, 0.02, 0.01, 0.005),
    "cifar10": (0.12, 0.11, 0.10, 0.09, 0.08),
    "mnist": (0.04, 0.02, 0.01, 0.005, 0.0025),
}
LEARNING_RATES = {"emnist": 0.035, "cifar10": 0.05, "mnist": 0.015}
CLIENTS_PER_ROUND = {"emnist": 35, "cifar10": 10, "mnist": 10}

DEFAULT_DROPOUT = 0.125


@dataclass(frozen=True)
class GrowthSchedule:
    """Ordered model sequence with per-switch thresholds."""

    dataset: str
    models: tuple[nn.ModelArch, ...]
    thresholds: tuple[float, ...]

    @property
    def num_models(self) -> int:
        return len(self.models)


@dataclass(frozen=True)
class TransformStep:
    """One structural edit; ``layer`` indexes the arch the step applies to.

    Steps in a ModelDiff apply sequentially, so each ``layer`` index refers
    to the architecture produced by the preceding steps.

    kinds and arguments:
      split-pool(layer)                       4x4 pool -> two 2x2 pools
      insert-conv-identity(layer, channels, kernel)
      insert-dense-identity(layer, units)
      widen-conv(layer, new_width)
      widen-dense(layer, new_width)
    """

    kind: str
    layer: int
    new_width: int = 0
    channels: int = 0
    units: int = 0
    kernel: int = 0


@dataclass(frozen=True)
class ModelDiff:
    """Transform steps turning one architecture into the next."""

    steps: tuple[TransformStep, ...]


# ---------------------------------------------------------------------------
# Architecture builders
#
# Every conv and dense layer except the final classifier is followed by a
# relu and a dropout layer; the classifier is followed by softmax. A
# flatten layer is inserted automatically when a dense layer follows a
# spatial one.


def build_arch(input_shape, tokens, dropout_rate: float = DEFAULT_DROPOUT,
               name: str = "") -> nn.ModelArch:
    """Assemble a full architecture from compact layer tokens.

    Tokens: ("conv", out_channels, kernel_side), ("pool", window),
    ("dense", units), ("gap",). The last dense token is the classifier.
    """
    layers: list[nn.LayerSpec] = []
    cur = tuple(input_shape)
    last_dense = max(i for i, t in enumerate(tokens) if t[0] == "dense")
    for ti, tok in enumerate(tokens):
        kind = tok[0]
        if kind == "conv":
            _, out_ch, k = tok
            if len(cur) != 3:
                raise ConfigError(f"token {ti}: conv after flat shape {cur}")
            layers.append(nn.conv2d(nn.KernelShape(k, k, cur[2], out_ch)))
            layers.extend((nn.relu(), nn.dropout(dropout_rate)))
            cur = (cur[0], cur[1], out_ch)
        elif kind == "pool":
            _, window = tok
            layers.append(nn.maxpool(window))
            cur = (cur[0] // window, cur[1] // window, cur[2])
        elif kind == "gap":
            layers.append(nn.global_avg_pool())
            cur = (cur[2],)
        elif kind == "dense":
            _, units = tok
            if len(cur) == 3:
                layers.append(nn.flatten())
                cur = (cur[0] * cur[1] * cur[2],)
            layers.append(nn.dense(cur[0], units))
            if ti == last_dense:
                layers.append(nn.softmax())
            else:
                layers.extend((nn.relu(), nn.dropout(dropout_rate)))
            cur = (units,)
        else:
            raise ConfigError(f"token {ti}: unknown token kind {kind!r}")
    arch = nn.ModelArch(tuple(input_shape), tuple(layers), name=name)
    nn.validate_arch(arch)
    return arch


def _mnist_family_tokens(classes: int, fc_units):
    """Six-model token rows shared by the two 28x28 grayscale benchmarks."""
    u1, u2, u3, u4, u5, u6 = fc_units
    return [
        [("conv", 16, 5), ("pool", 4), ("dense", u1), ("dense", classes)],
        [("conv", 32, 5), ("pool", 4), ("dense", u2), ("dense", classes)],
        [("conv", 32, 5), ("pool", 2), ("conv", 32, 5), ("pool", 2),
         ("dense", u3), ("dense", classes)],
        [("conv", 32, 5), ("pool", 2), ("conv", 64, 5), ("pool", 2),
         ("dense", u4), ("dense", classes)],
        [("conv", 32, 5), ("pool", 2), ("conv", 64, 5), ("pool", 2),
         ("dense", u5), ("dense", classes)],
        [("conv", 32, 5), ("pool", 2), ("conv", 64, 5), ("pool", 2),
         ("dense", u6), ("dense", classes)],
    ]


def _cifar_tokens():
    # The trailing 10-channel conv ahead of global average pooling uses a
    # 1x1 kernel in every model, as does the conv inserted last; with 3x3
    # kernels there the published per-model parameter counts cannot be
    # reproduced.
    return [
        [("conv", 32, 3), ("pool", 3), ("conv", 64, 3), ("pool", 3),
         ("conv", 10, 1), ("gap",), ("dense", 10)],
        [("conv", 32, 3), ("conv", 32, 3), ("pool", 3), ("conv", 64, 3),
         ("conv", 64, 3), ("pool", 3), ("conv", 10, 1), ("gap",), ("dense", 10)],
        [("conv", 64, 3), ("conv", 64, 3), ("pool", 3), ("conv", 128, 3),
         ("conv", 128, 3), ("pool", 3), ("conv", 10, 1), ("gap",), ("dense", 10)],
        [("conv", 96, 3), ("conv", 96, 3), ("pool", 3), ("conv", 192, 3),
         ("conv", 192, 3), ("pool", 3), ("conv", 10, 1), ("gap",), ("dense", 10)],
        [("conv", 96, 3), ("conv", 96, 3), ("pool", 3), ("conv", 192, 3),
         ("conv", 192, 3), ("pool", 3), ("conv", 192, 3), ("conv", 10, 1),
         ("gap",), ("dense", 10)],
        [("conv", 96, 3), ("conv", 96, 3), ("pool", 3), ("conv", 192, 3),
         ("conv", 192, 3), ("pool", 3), ("conv", 192, 3), ("conv", 192, 1),
         ("conv", 10, 1), ("gap",), ("dense", 10)],
    ]


def builtin_schedule(dataset: str, dropout_rate: float = DEFAULT_DROPOUT) -> GrowthSchedule:
    """The six-model growth schedule for a builtin dataset tag."""
    if dataset == "emnist":
        rows = _mnist_family_tokens(62, (512, 512, 512, 512, 1024, 2048))
        shape = (28, 28, 1)
    elif dataset == "mnist":
        rows = _mnist_family_tokens(10, (128, 128, 128, 128, 256, 512))
        shape = (28, 28, 1)
    elif dataset == "cifar10":
        rows = _cifar_tokens()
        shape = (32, 32, 3)
    else:
        raise ConfigError(f"unknown dataset tag {dataset!r}")
    models = tuple(
        build_arch(shape, row, dropout_rate, name=f"{dataset}-model-{i + 1}")
        for i, row in enumerate(rows))
    schedule = GrowthSchedule(dataset, models, THRESHOLDS[dataset])
    validate_schedule(schedule)
    return schedule


# ---------------------------------------------------------------------------
# Structural diffing


def apply_step_to_arch(arch: nn.ModelArch, step: TransformStep) -> nn.ModelArch:
    """Apply one step structurally (specs only, no parameters)."""
    layers = list(arch.layers)
    i = step.layer
    if not 0 <= i <= len(layers):
        raise ScheduleError(f"step {step.kind}: layer index {i} out of range")
    if step.kind == "split-pool":
        spec = layers[i]
        if spec.kind != "maxpool" or spec.window != 4:
            raise ScheduleError(f"split-pool at layer {i}: expected a 4x4 maxpool")
        layers[i:i + 1] = [nn.maxpool(2), nn.maxpool(2)]
    elif step.kind == "insert-conv-identity":
        rate = _nearest_dropout_rate(arch)
        block = [nn.conv2d(nn.KernelShape(step.kernel, step.kernel,
                                          step.channels, step.channels)),
                 nn.relu(), nn.dropout(rate)]
        layers[i:i] = block
    elif step.kind == "insert-dense-identity":
        rate = _nearest_dropout_rate(arch)
        layers[i:i] = [nn.dense(step.units, step.units), nn.relu(), nn.dropout(rate)]
    elif step.kind in ("widen-conv", "widen-dense"):
        spec = layers[i]
        if step.kind == "widen-conv":
            if spec.kind != "conv2d":
                raise ScheduleError(f"widen-conv at layer {i}: not a conv layer")
            old_width = spec.kernel.o
            k = spec.kernel
            layers[i] = nn.conv2d(nn.KernelShape(k.w, k.h, k.i, step.new_width),
                                  spec.padding, spec.stride)
        else:
            if spec.kind != "dense":
                raise ScheduleError(f"widen-dense at layer {i}: not a dense layer")
            old_width = spec.out_units
            layers[i] = nn.dense(spec.in_units, step.new_width)
        nxt = nn.next_trainable(arch, i)
        if nxt is None:
            raise ScheduleError(f"widen at layer {i}: no next trainable layer")
        # The receiving layer sees `ratio` inputs per channel of the widened
        # layer: 1 when directly adjacent or across gap, H*W across flatten.
        nspec = layers[nxt]
        next_in_old = nspec.kernel.i if nspec.kind == "conv2d" else nspec.in_units
        if next_in_old % old_width:
            raise ScheduleError(
                f"widen at layer {i}: next layer input {next_in_old} is not a "
                f"multiple of width {old_width}")
        ratio = next_in_old // old_width
        layers[nxt] = _with_in_width(nspec, ratio * step.new_width)
    else:
        raise ScheduleError(f"unknown transform step kind {step.kind!r}")
    return arch.with_layers(layers)


def _nearest_dropout_rate(arch: nn.ModelArch) -> float:
    for spec in arch.layers:
        if spec.kind == "dropout":
            return spec.rate
    return DEFAULT_DROPOUT


def _incoming_width(arch: nn.ModelArch, position: int) -> int:
    """Channel count (spatial shapes) or unit count (flat shapes) entering
    ``position`` in the layer list."""
    shape = nn.shape_before(arch, position)
    return shape[2] if len(shape) == 3 else int(shape[0])


def _with_in_width(spec: nn.LayerSpec, width: int) -> nn.LayerSpec:
    if spec.kind == "conv2d":
        k = spec.kernel
        return nn.conv2d(nn.KernelShape(k.w, k.h, width, k.o), spec.padding, spec.stride)
    return nn.dense(width, spec.out_units)


def _structurally_same(a: nn.LayerSpec, b: nn.LayerSpec) -> bool:
    """Kind-level match ignoring layer widths (which widening changes)."""
    if a.kind != b.kind:
        return False
    if a.kind == "conv2d":
        return (a.kernel.w, a.kernel.h, a.padding, a.stride) == \
               (b.kernel.w, b.kernel.h, b.padding, b.stride)
    if a.kind == "maxpool":
        return a.window == b.window
    return True


def _first_structural_mismatch(cur: nn.ModelArch, target: nn.ModelArch):
    for i, (a, b) in enumerate(zip(cur.layers, target.layers)):
        if not _structurally_same(a, b):
            return i
    if len(cur.layers) != len(target.layers):
        return min(len(cur.layers), len(target.layers))
    return None


def diff_models(a: nn.ModelArch, b: nn.ModelArch) -> ModelDiff:
    """Transform steps that turn architecture ``a`` into ``b``.

    Emits pool splits first, then identity insertions, then widenings,
    and validates the result by structural replay. Raises ScheduleError
    when ``b`` is not reachable.
    """
    if tuple(a.input_shape) != tuple(b.input_shape):
        raise ScheduleError("models have different input shapes")
    steps: list[TransformStep] = []
    cur = a

    # Pool splits: a 4x4 pool in `cur` facing a 2x2 pool in `b`.
    while True:
        i = _first_structural_mismatch(cur, b)
        if i is None or i >= len(cur.layers) or i >= len(b.layers):
            break
        ca, cb = cur.layers[i], b.layers[i]
        if ca.kind == "maxpool" and cb.kind == "maxpool" and \
                ca.window == 4 and cb.window == 2:
            step = TransformStep("split-pool", i)
            cur = apply_step_to_arch(cur, step)
            steps.append(step)
        else:
            break

    # Identity insertions: `b` has an extra conv/dense block at the mismatch.
    while True:
        i = _first_structural_mismatch(cur, b)
        if i is None:
            break
        if i >= len(b.layers):
            raise ScheduleError(f"layer {i}: target model is shorter than source")
        tb = b.layers[i]
        matched = i < len(cur.layers) and _structurally_same(cur.layers[i], tb)
        if matched:
            break
        if tb.kind == "conv2d":
            width = _incoming_width(cur, i)
            step = TransformStep("insert-conv-identity", i,
                                 channels=width, kernel=tb.kernel.w)
        elif tb.kind == "dense":
            width = _incoming_width(cur, i)
            step = TransformStep("insert-dense-identity", i, units=width)
        else:
            have = cur.layers[i].kind if i < len(cur.layers) else "end"
            raise ScheduleError(
                f"layer {i}: cannot reach target (target wants {tb.kind!r}, "
                f"source has {have!r})")
        cur = apply_step_to_arch(cur, step)
        steps.append(step)

    if len(cur.layers) != len(b.layers):
        raise ScheduleError(
            f"layer {min(len(cur.layers), len(b.layers))}: models have "
            "incompatible structure")

    # Widenings, in layer order.
    for i, tb in enumerate(b.layers):
        ca = cur.layers[i]
        if ca.kind == "conv2d" and ca.kernel.o != tb.kernel.o:
            if ca.kernel.o > tb.kernel.o:
                raise ScheduleError(f"layer {i}: target conv is narrower "
                                    f"({ca.kernel.o} -> {tb.kernel.o})")
            step = TransformStep("widen-conv", i, new_width=tb.kernel.o)
            cur = apply_step_to_arch(cur, step)
            steps.append(step)
        elif ca.kind == "dense" and ca.out_units != tb.out_units:
            if ca.out_units > tb.out_units:
                raise ScheduleError(f"layer {i}: target dense is narrower "
                                    f"({ca.out_units} -> {tb.out_units})")
            step = TransformStep("widen-dense", i, new_width=tb.out_units)
            cur = apply_step_to_arch(cur, step)
            steps.append(step)

    if cur.layers != b.layers:
        i = next(j for j, (x, y) in enumerate(zip(cur.layers, b.layers)) if x != y)
        raise ScheduleError(f"layer {i}: replayed structure does not match target "
                            f"({cur.layers[i]} vs {b.layers[i]})")
    return ModelDiff(tuple(steps))


def validate_schedule(schedule: GrowthSchedule):
    """Check arity, growth and reachability; raise ScheduleError with every
    violation found."""
    problems = []
    n = len(schedule.models)
    if n < 1:
        problems.append("schedule has no models")
    if len(schedule.thresholds) != max(n - 1, 0):
        problems.append(
            f"threshold arity: {len(schedule.thresholds)} thresholds for {n} models "
            f"(expected {max(n - 1, 0)})")
    if any(t <= 0 for t in schedule.thresholds):
        problems.append("thresholds must be positive")
    for mi, model in enumerate(schedule.models):
        try:
            nn.validate_arch(model)
        except ConfigError as e:
            problems.append(f"model {mi + 1}: {e}")
    counts = [nn.count_params(m) for m in schedule.models]
    for mi in range(n - 1):
        if counts[mi + 1] <= counts[mi]:
            problems.append(
                f"non-increasing parameter count: model {mi + 1} has {counts[mi]}, "
                f"model {mi + 2} has {counts[mi + 1]}")
        try:
            diff_models(schedule.models[mi], schedule.models[mi + 1])
        except ScheduleError as e:
            problems.append(f"models {mi + 1} -> {mi + 2} not reachable: {e}")
    if problems:
        raise ScheduleError(problems)


def schedule_diffs(schedule: GrowthSchedule) -> list[ModelDiff]:
    return [diff_models(schedule.models[i], schedule.models[i + 1])
            for i in range(len(schedule.models) - 1)]


# ---------------------------------------------------------------------------
# Serialization


def _arch_to_tokens(arch: nn.ModelArch) -> list:
    tokens = []
    for spec in arch.layers:
        if spec.kind == "conv2d":
            tokens.append({"conv": spec.kernel.o, "kernel": spec.kernel.w})
        elif spec.kind == "maxpool":
            tokens.append({"pool": spec.window})
        elif spec.kind == "gap":
            tokens.append({"gap": True})
        elif spec.kind == "dense":
            tokens.append({"dense": spec.out_units})
    return tokens


def schedule_to_dict(schedule: GrowthSchedule) -> dict:
    first = schedule.models[0]
    return {
        "dataset": schedule.dataset,
        "input_shape": list(first.input_shape),
        "dropout_rate": _nearest_dropout_rate(first),
        "thresholds": list(schedule.thresholds),
        "models": [_arch_to_tokens(m) for m in schedule.models],
    }


def schedule_from_dict(data: dict) -> GrowthSchedule:
    """Build and validate a schedule from its JSON form.

    Expected keys: dataset (str), input_shape ([H, W, C]),
    thresholds ([float] of length len(models) - 1), models (list of
    token rows), optional dropout_rate. Token forms:
    {"conv": out_channels, "kernel": side}, {"pool": window},
    {"gap": true}, {"dense": units}. The final dense token of each row
    is the classifier.
    """
    try:
        dataset = data["dataset"]
        input_shape = tuple(int(v) for v in data["input_shape"])
        thresholds = tuple(float(t) for t in data["thresholds"])
        rows = data["models"]
    except (KeyError, TypeError, ValueError) as e:
        raise ScheduleError([f"malformed schedule data: {e!r}"])
    rate = float(data.get("dropout_rate", DEFAULT_DROPOUT))
    models = []
    for mi, row in enumerate(rows):
        tokens = []
        for tok in row:
            if "conv" in tok:
                tokens.append(("conv", int(tok["conv"]), int(tok.get("kernel", 3))))
            elif "pool" in tok:
                tokens.append(("pool", int(tok["pool"])))
            elif "gap" in tok:
                tokens.append(("gap",))
            elif "dense" in tok:
                tokens.append(("dense", int(tok["dense"])))
            else:
                raise ScheduleError([f"model {mi + 1}: unknown token {tok!r}"])
        models.append(build_arch(input_shape, tokens, rate,
                                 name=f"{dataset}-model-{mi + 1}"))
    schedule = GrowthSchedule(dataset, tuple(models), thresholds)
    validate_schedule(schedule)
    return schedule


def load_schedule(path) -> GrowthSchedule:
    with open(path) as fh:
        return schedule_from_dict(json.load(fh))


def save_schedule(schedule: GrowthSchedule, path) -> None:
    Path(path).write_text(json.dumps(schedule_to_dict(schedule), indent=2) + "\n")
