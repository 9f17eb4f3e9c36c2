"""Registered gradient-check suites for the `gradcheck` command.

Each check builds a tiny instance, runs the central-difference verifier over
every trainable parameter, and reports the worst relative error. Isolated
loss terms must pass at 1e-5; the composed objective (benefit mask frozen)
at 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import backbone as bb
from . import contradiction as ct
from . import corpus
from . import diffcore as dc
from . import fusion as fu
from . import promptvq as pv
from . import toylm
from .config import TrainConfig
from .diffcore import ParameterRegistry, Tensor, finite_diff_check
from .pipeline import ModelState, compute_losses, forward_batch

TOL_TERM = 1e-5
TOL_TOTAL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_rel_err: float
    tol: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_err:.3e} (tol {self.tol:g})"


def _run(name: str, build: Callable[[], tuple[Callable[[], Tensor], ParameterRegistry]],
         tol: float) -> CheckResult:
    f, reg = build()
    report = finite_diff_check(f, reg, eps=1e-5, tol=tol)
    return CheckResult(name, report.passed, report.max_rel_err, tol)


# -- primitive battery -----------------------------------------------------


def _primitive_checks() -> list[CheckResult]:
    rng = np.random.default_rng(101)
    results = []

    weights = rng.normal(size=(4, 5))
    cases = {
        "primitive.matmul": lambda p: dc.tsum(dc.tanh(dc.matmul(p["a"], p["b"]))),
        "primitive.softmax": lambda p: dc.tsum(
            dc.mul(dc.softmax(p["a"], axis=-1), Tensor(weights))),
        "primitive.layer_norm": lambda p: dc.tsum(
            dc.layer_norm(p["a"], p["g"], p["bias"])),
        "primitive.log_sum_exp": lambda p: dc.tsum(dc.log_sum_exp(p["a"], axis=-1)),
        "primitive.cosine": lambda p: dc.tsum(dc.cosine_rows(p["a"], p["c"])),
        "primitive.reductions": lambda p: dc.add(
            dc.tmean(dc.mul(p["a"], p["a"])), dc.tsum(dc.exp(dc.scale(p["a"], 0.1)))),
        "primitive.concat_mask": lambda p: dc.tsum(
            dc.mul(dc.concat([p["a"], p["a"]], axis=1),
                   Tensor(np.tile(np.arange(10) % 2, (4, 1))))),
    }
    for name, fn in cases.items():
        def build(fn=fn):
            reg = ParameterRegistry()
            p = {
                "a": reg.register("a", Tensor(rng.normal(size=(4, 5)))),
                "b": reg.register("b", Tensor(rng.normal(size=(5, 6)))),
                "c": reg.register("c", Tensor(rng.normal(size=(3, 5)))),
                "g": reg.register("g", Tensor(rng.normal(1.0, 0.1, 5))),
                "bias": reg.register("bias", Tensor(rng.normal(size=5))),
            }
            return (lambda: fn(p)), reg
        results.append(_run(name, build, TOL_TERM))

    results.append(_stop_gradient_check(rng))
    return results


def _stop_gradient_check(rng: np.random.Generator) -> CheckResult:
    """A finite-difference probe cannot validate a gradient cut (the forward
    value moves while the analytic adjoint must not), so this contract is
    asserted directly."""
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    dc.tsum(dc.stop_gradient(x)).backward()
    err = 0.0 if x.grad is None else float(np.abs(x.grad).max())
    x.grad = None
    out = dc.add(x, dc.stop_gradient(x))
    forward_err = float(np.abs(out.data - 2 * x.data).max())
    dc.tsum(out).backward()
    err = max(err, forward_err, float(np.abs(x.grad - 1.0).max()))
    return CheckResult("primitive.stop_gradient", err == 0.0, err, 0.0)


# -- isolated loss terms ----------------------------------------------------


def _loss_checks() -> list[CheckResult]:
    rng = np.random.default_rng(202)
    results = []

    def build_info_nce():
        reg = ParameterRegistry()
        u = reg.register("u", Tensor(rng.normal(size=(1, 8))))
        vp = reg.register("v_pos", Tensor(rng.normal(size=(1, 8))))
        vn = reg.register("v_negs", Tensor(rng.normal(size=(4, 8))))
        return (lambda: bb.info_nce(u, vp, vn, tau=0.7)), reg

    results.append(_run("loss.info_nce", build_info_nce, TOL_TERM))

    def build_ortho():
        reg = ParameterRegistry()
        z = reg.register("z", Tensor(rng.normal(size=(4, 8))))
        return (lambda: fu.orthogonality_loss(z)), reg

    results.append(_run("loss.orthogonality", build_ortho, TOL_TERM))

    def build_quant():
        reg = ParameterRegistry()
        e = reg.register("e_u", Tensor(rng.normal(size=(2, 8))))
        z = reg.register("z", Tensor(rng.normal(size=(4, 8))))
        cb = pv.PromptCodebook(z=z, z_share=Tensor(np.ones((1, 8))))
        sel = pv.PromptSelection(
            scores=Tensor(np.zeros((2, 4))), raw_cos=Tensor(np.zeros((2, 4))),
            selected=[np.array([0, 2]), np.array([1])], m=np.array([2, 1]))
        return (lambda: pv.quantization_loss(e, sel, cb)), reg

    results.append(_run("loss.quantization", build_quant, TOL_TERM))

    def build_lora():
        reg = ParameterRegistry()
        a = reg.register("A", Tensor(rng.normal(size=(6, 2))))
        b = reg.register("B", Tensor(rng.normal(size=(2, 6))))
        reg.register("W", Tensor(rng.normal(size=(6, 6))), frozen=True)
        ad = toylm.LoRAAdapter(A=a, B=b, rank=2, alpha=16.0, dropout=0.0)
        w = reg["W"]
        x = rng.normal(size=(3, 6))
        return (lambda: dc.tsum(dc.tanh(dc.matmul(Tensor(x), toylm.lora_apply(w, ad))))), reg

    results.append(_run("loss.lora_apply", build_lora, TOL_TERM))
    return results


# -- fusion operations --------------------------------------------------------


def _fusion_checks() -> list[CheckResult]:
    rng = np.random.default_rng(303)
    results = []

    def build_decouple():
        reg = ParameterRegistry()
        p = fu.FusionParams(d_llm=8, d_rs=6, rng=rng)
        for name, t in p.named_tensors():
            reg.register(name, t, group="fusion")
        h_prompt = reg.register("h_prompt", Tensor(rng.normal(size=(2, 3, 8))))
        h_mix = reg.register("h_mix", Tensor(rng.normal(size=(2, 5, 8))))
        mix_mask = np.array([[1.0] * 4 + [0.0], [1.0] * 5])
        p_mask = np.array([[1.0, 1.0, 0.0], [1.0] * 3])
        w = rng.normal(size=(2, 3, 6))
        return (lambda: dc.tsum(dc.mul(
            fu.decouple(h_prompt, p_mask, h_mix, mix_mask, p), Tensor(w)))), reg

    results.append(_run("fusion.decouple", build_decouple, TOL_TERM))

    def build_align():
        reg = ParameterRegistry()
        p = fu.FusionParams(d_llm=8, d_rs=6, rng=rng)
        for name, t in p.named_tensors():
            reg.register(name, t, group="fusion")
        h_rs = reg.register("h_rs", Tensor(rng.normal(size=(2, 6))))
        h_pure = reg.register("h_pure", Tensor(rng.normal(size=(2, 3, 6))))
        mask = np.array([[1.0, 1.0, 0.0], [1.0] * 3])
        h_pure_masked = dc.mul(h_pure, Tensor(mask[:, :, None]))
        v = rng.normal(size=(2, 6))
        return (lambda: dc.tsum(dc.cosine_rows(
            fu.align(h_rs, dc.mul(h_pure, Tensor(mask[:, :, None])), mask, p),
            Tensor(v)))), reg

    results.append(_run("fusion.align", build_align, TOL_TERM))
    return results


# -- composed objective -------------------------------------------------------


def toy_setup(variant: str = "full") -> tuple[ModelState, corpus.Batch, TrainConfig]:
    """Tiny end-to-end instance: d<=16, K<=8, B<=4."""
    cfg = TrainConfig(
        seed=11, epochs=1, batch_size=2, d_rs=8, backbone_blocks=1,
        backbone_heads=2, d_llm=8, lm_layers=1, lm_heads=2, codebook_size=4,
        shared_prompts=2, lora_rank=2, t_max=6, t_text=2, l_max=24,
        theta=0.2, variant=variant)
    dataset = corpus.prepare(
        corpus.synth_generate(6, 10, 2, 0.8, seed=5, min_len=6, max_len=8))
    state = ModelState.initialize(cfg, dataset)
    batch = corpus.make_batches(dataset, 2, cfg.t_max, seed=1)[0]
    return state, batch, cfg


def _total_loss_check() -> CheckResult:
    state, batch, _ = toy_setup()
    base = forward_batch(state, batch, training=False)
    # a mixed benefit mask exercises both the stopped and the live branch
    frozen_mask = base.mask.copy()
    frozen_mask[0] = 1.0
    if len(frozen_mask) > 1:
        frozen_mask[1] = 0.0
    frozen_sel = [s.copy() for s in base.selection.selected]
    frozen_stopped = base.h_aligned.data.copy()

    def f():
        trace = forward_batch(state, batch, training=False,
                              fixed_mask=frozen_mask,
                              fixed_selection=frozen_sel,
                              fixed_stopped=frozen_stopped)
        return compute_losses(state, trace, batch).l_total

    report = finite_diff_check(f, state.registry, eps=1e-5, tol=TOL_TOTAL)
    return CheckResult("model.total_loss", report.passed, report.max_rel_err,
                       TOL_TOTAL)


SCOPES = ("all", "primitives", "losses", "fusion", "model")


def run_scope(scope: str) -> list[CheckResult]:
    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {SCOPES}")
    results: list[CheckResult] = []
    if scope in ("all", "primitives"):
        results.extend(_primitive_checks())
    if scope in ("all", "losses"):
        results.extend(_loss_checks())
    if scope in ("all", "fusion"):
        results.extend(_fusion_checks())
    if scope in ("all", "model"):
        results.append(_total_loss_check())
    return results
