"""Central finite-difference verification of analytic gradients.

`check_function` compares backward-pass gradients against central finite
differences recomputed in float64. The full `run_suite` covers every
differentiable operation and the composite paths through the network; it
backs both the test suite and the `gradcheck` CLI subcommand.
"""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T

__all__ = ["relative_error", "check_function", "run_suite", "SUITE_TOL_32", "SUITE_TOL_64"]

SUITE_TOL_32 = 1e-3
SUITE_TOL_64 = 1e-5

_MAX_COORDS = 24


def relative_error(a, b):
    """Norm-based relative error between two gradient vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def _sample_coords(arr, rng, max_coords=_MAX_COORDS):
    n = arr.size
    if n <= max_coords:
        return np.arange(n)
    return rng.choice(n, size=max_coords, replace=False)


def check_function(build, arrays, h=1e-3, rng=None, max_coords=_MAX_COORDS):
    """Compare analytic and finite-difference gradients of a scalar function.

    `build` maps a dict of Tensors to a scalar Tensor and is re-invoked for
    every finite-difference evaluation. `arrays` holds the float64 base
    values. The analytic pass runs at the caller's active precision; the
    numeric pass always runs in float64. Returns {name: relative_error}
    over a deterministic sample of coordinates per input.
    """
    rng = rng or np.random.default_rng(0)
    names = list(arrays)

    tensors = {k: T.Tensor(arrays[k], requires_grad=True) for k in names}
    loss = build(tensors)
    loss.backward()
    analytic = {}
    for k in names:
        g = tensors[k].grad
        analytic[k] = np.zeros_like(arrays[k]) if g is None else np.asarray(g, dtype=np.float64)

    def eval_at(values):
        with T.precision(np.float64), T.no_grad():
            ts = {k: T.Tensor(values[k]) for k in names}
            return float(build(ts).data)

    errors = {}
    base = {k: np.asarray(arrays[k], dtype=np.float64).copy() for k in names}
    for k in names:
        coords = _sample_coords(base[k], rng)
        numeric = np.zeros(len(coords))
        flat = base[k].ravel()
        for i, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            up = eval_at(base)
            flat[c] = orig - h
            down = eval_at(base)
            flat[c] = orig
            numeric[i] = (up - down) / (2.0 * h)
        errors[k] = relative_error(analytic[k].ravel()[coords], numeric)
    return errors


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _cases():
    """Named gradient-check cases: (name, build, arrays)."""
    rng = np.random.default_rng(2024)
    cases = []

    def case(name, build, **arrays):
        cases.append((name, build, arrays))

    case("add_broadcast", lambda t: (t["a"] + t["b"]).sum(), a=_rand(rng, 3, 4), b=_rand(rng, 4))
    case("sub", lambda t: (t["a"] - t["b"]).mean(), a=_rand(rng, 2, 5), b=_rand(rng, 2, 5))
    case("mul_broadcast", lambda t: (t["a"] * t["b"]).sum(), a=_rand(rng, 3, 4), b=_rand(rng, 3, 1))
    case(
        "div",
        lambda t: (t["a"] / t["b"]).sum(),
        a=_rand(rng, 3, 3),
        b=_rand(rng, 3, 3) + 3.0,
    )
    case("power", lambda t: (T.power(t["a"], 3.0)).sum(), a=_rand(rng, 4, 4) + 2.5)
    case("exp", lambda t: T.exp(t["a"]).sum(), a=_rand(rng, 3, 3))
    case("log", lambda t: T.log(t["a"]).sum(), a=np.abs(_rand(rng, 3, 3)) + 1.0)
    case("abs", lambda t: T.absolute(t["a"]).sum(), a=_rand(rng, 4, 4) + 2.0)
    case("relu", lambda t: T.relu(t["a"]).sum(), a=_rand(rng, 4, 4) + 0.3)
    case("gelu", lambda t: T.gelu(t["a"]).sum(), a=_rand(rng, 4, 4))
    case("sigmoid", lambda t: T.sigmoid(t["a"]).sum(), a=_rand(rng, 4, 4))
    case(
        "matmul",
        lambda t: T.matmul(t["a"], t["b"]).sum(),
        a=_rand(rng, 3, 4),
        b=_rand(rng, 4, 2),
    )
    case(
        "matmul_batched",
        lambda t: (T.matmul(t["a"], t["b"]) * t["c"]).sum(),
        a=_rand(rng, 2, 3, 4),
        b=_rand(rng, 4, 5),
        c=_rand(rng, 2, 3, 5),
    )
    case(
        "reshape_transpose",
        lambda t: (T.transpose(T.reshape(t["a"], (4, 6)), (1, 0)) * t["b"]).sum(),
        a=_rand(rng, 2, 3, 4),
        b=_rand(rng, 6, 4),
    )
    case(
        "concat_narrow",
        lambda t: (T.narrow(T.concat([t["a"], t["b"]], axis=1), 1, 1, 3) ** 2.0).sum(),
        a=_rand(rng, 2, 2),
        b=_rand(rng, 2, 3),
    )
    case("expand0", lambda t: (T.expand0(t["a"], 5) * t["b"]).sum(), a=_rand(rng, 3, 2), b=_rand(rng, 5, 3, 2))
    case("sum_axis", lambda t: (t["a"].sum(axis=1) ** 2.0).sum(), a=_rand(rng, 3, 4))
    case("mean_axis", lambda t: (t["a"].mean(axis=(0, 2)) ** 2.0).sum(), a=_rand(rng, 2, 3, 4))
    case(
        "softmax",
        lambda t: (T.softmax(t["a"], axis=-1) * t["b"]).sum(),
        a=_rand(rng, 3, 5),
        b=_rand(rng, 3, 5),
    )
    case(
        "log_softmax",
        lambda t: (T.log_softmax(t["a"], axis=-1) * t["b"]).sum(),
        a=_rand(rng, 3, 5),
        b=_rand(rng, 3, 5),
    )
    case(
        "layer_norm",
        lambda t: (T.layer_norm(t["x"], t["g"], t["b"]) * t["w"]).sum(),
        x=_rand(rng, 4, 6),
        g=_rand(rng, 6) + 1.0,
        b=_rand(rng, 6),
        w=_rand(rng, 4, 6),
    )
    case(
        "batch_norm_train",
        lambda t: (
            T.batch_norm(t["x"], t["g"], t["b"], T.BatchNormState(3, t["x"].dtype), True) * t["w"]
        ).sum(),
        x=_rand(rng, 2, 3, 4, 4),
        g=_rand(rng, 3) + 1.0,
        b=_rand(rng, 3),
        w=_rand(rng, 2, 3, 4, 4),
    )
    case(
        "clip",
        lambda t: (T.clip(t["a"], -1.0, 1.0) * t["b"]).sum(),
        a=_rand(rng, 4, 4) * 0.4,
        b=_rand(rng, 4, 4),
    )
    case(
        "conv2d",
        lambda t: (T.conv2d(t["x"], t["w"], t["b"], stride=1, padding=1) * t["m"]).sum(),
        x=_rand(rng, 2, 3, 5, 6),
        w=_rand(rng, 4, 3, 3, 3),
        b=_rand(rng, 4),
        m=_rand(rng, 2, 4, 5, 6),
    )
    case(
        "conv2d_stride2",
        lambda t: (T.conv2d(t["x"], t["w"], None, stride=2, padding=1) ** 2.0).sum(),
        x=_rand(rng, 1, 2, 6, 6),
        w=_rand(rng, 3, 2, 3, 3),
    )
    case(
        "bilinear_upsample",
        lambda t: (T.bilinear_upsample(t["x"], (6, 8)) * t["m"]).sum(),
        x=_rand(rng, 1, 2, 3, 4),
        m=_rand(rng, 1, 2, 6, 8),
    )
    cases.extend(_composite_cases(rng))
    return cases


def _composite_cases(rng):
    """End-to-end checks through the network building blocks."""
    from . import losses as losses_mod
    from .backbone import BackboneConfig
    from .decoding import channel_decode, spatial_decode
    from .model import MultiTaskModel, model_loss_builder

    cases = []

    def case(name, build, **arrays):
        cases.append((name, build, arrays))

    # Window attention end-to-end through prompt duplicate/average, holding
    # the prompts and attention weights as checked inputs.
    w2, tasks, ch, heads, nwin = 4, 2, 4, 2, 3

    def attn_build(t):
        from .backbone import average_window_prompts, duplicate_prompts, window_attention_batch

        tokens = T.reshape(t["tokens"], (nwin, w2, ch))
        prompts = duplicate_prompts(t["prompts"], nwin)
        weights = {k: t[k] for k in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}
        out_tokens, out_prompts, affinity, values = window_attention_batch(
            tokens, prompts, weights, heads
        )
        merged = average_window_prompts(out_prompts)
        return (
            (out_tokens * t["mt"]).sum()
            + (merged * t["mp"]).sum()
            + (affinity * t["ma"]).sum()
            + (values * t["mv"]).sum()
        )

    case(
        "window_attention_prompts",
        attn_build,
        tokens=_rand(rng, nwin * w2, ch),
        prompts=_rand(rng, tasks, ch) * 0.5,
        wq=_rand(rng, ch, ch) * 0.5,
        wk=_rand(rng, ch, ch) * 0.5,
        wv=_rand(rng, ch, ch) * 0.5,
        wo=_rand(rng, ch, ch) * 0.5,
        bq=_rand(rng, ch) * 0.1,
        bk=_rand(rng, ch) * 0.1,
        bv=_rand(rng, ch) * 0.1,
        bo=_rand(rng, ch) * 0.1,
        mt=_rand(rng, nwin, w2, ch),
        mp=_rand(rng, tasks, ch),
        ma=_rand(rng, nwin, heads, tasks, w2),
        mv=_rand(rng, nwin, heads, w2, ch // heads),
    )

    def merge_build(t):
        from .backbone import patch_merging

        tokens, prompts = patch_merging(
            t["tokens"], t["prompts"], (4, 4), t["w"], [t["pw0"], t["pw1"]]
        )
        return (tokens * t["mt"]).sum() + (prompts * t["mp"]).sum()

    case(
        "patch_merging",
        merge_build,
        tokens=_rand(rng, 16, 3),
        prompts=_rand(rng, 2, 3),
        w=_rand(rng, 12, 6) * 0.5,
        pw0=_rand(rng, 3, 6) * 0.5,
        pw1=_rand(rng, 3, 6) * 0.5,
        mt=_rand(rng, 4 * 2, 6),
        mp=_rand(rng, 2, 6),
    )

    def spatial_decode_build(t):
        out = spatial_decode(t["affinity"], t["values"], t["proj"], window_area=4)
        return (out * t["m"]).sum()

    case(
        "spatial_decode",
        spatial_decode_build,
        affinity=np.abs(_rand(rng, 2, 4, 4)) * 0.2 + 0.05,
        values=_rand(rng, 16, 6),
        proj=_rand(rng, 6, 6) * 0.5,
        m=_rand(rng, 6, 4, 4),
    )

    def channel_decode_build(t):
        out = channel_decode(t["tokens"], t["prompt"], (3, 4))
        return (out * t["m"]).sum()

    case(
        "channel_decode",
        channel_decode_build,
        tokens=_rand(rng, 12, 5),
        prompt=_rand(rng, 5) * 0.5,
        m=_rand(rng, 5, 3, 4),
    )

    def focal_build(t):
        p = T.sigmoid(t["logits"])
        y = (np.arange(12).reshape(3, 4) % 5 == 0).astype(np.float64)
        return losses_mod.focal_loss(p, y)

    case("focal_loss", focal_build, logits=_rand(rng, 3, 4))

    def smooth_l1_build(t):
        return losses_mod.smooth_l1(t["x"])

    # keep residuals away from the |x| = beta kink for clean differences
    sl1 = _rand(rng, 4, 4) * 2.0
    sl1[np.abs(np.abs(sl1) - 1.0) < 0.1] = 0.5
    case("smooth_l1", smooth_l1_build, x=sl1)

    # Full model: every head and loss component, through decode and backbone.
    cfg = _tiny_model_config()
    model = MultiTaskModel(cfg, seed=11)
    build, arrays = model_loss_builder(model, seed=13)
    cases.append(("full_model_loss", build, arrays))
    return cases


def _tiny_model_config():
    from .config import ModelConfig
    from .backbone import BackboneConfig

    return ModelConfig(
        backbone=BackboneConfig(
            image_size=(16, 32),
            patch_size=4,
            stage_depths=(1, 1),
            stage_heads=(2, 2),
            base_channels=8,
            window_size=2,
        ),
        dec_channels=8,
        head_channels=8,
        num_sem_classes=4,
    )


def run_suite(verbose=False, tol32=SUITE_TOL_32, tol64=SUITE_TOL_64):
    """Run every case at 32-bit and 64-bit precision.

    Returns (all_passed, rows) where each row is
    (name, err32, err64, passed, seconds).
    """
    rows = []
    all_ok = True
    for name, build, arrays in _cases():
        start = time.perf_counter()
        errs32 = check_function(build, arrays)
        with T.precision(np.float64):
            errs64 = check_function(build, arrays)
        e32 = max(errs32.values())
        e64 = max(errs64.values())
        ok = e32 <= tol32 and e64 <= tol64
        all_ok = all_ok and ok
        elapsed = time.perf_counter() - start
        rows.append((name, e32, e64, ok, elapsed))
        if verbose:
            status = "ok" if ok else "FAIL"
            print(f"  {status:4s} {name:28s} rel32={e32:.2e} rel64={e64:.2e} ({elapsed:.2f}s)")
    return all_ok, rows
