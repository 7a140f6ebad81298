"""Objective assembly, the optimization loop, seeding, checkpointing, and the
finite-difference gradient verification harness."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import ioutils, synthdata, textproto
from .attention import CrossAttention, FeedForward, SelfAttention
from .backbone import VisionEncoder
from .config import (EncoderConfig, FusionConfig, LossWeights, QFormerConfig,
                     RunConfig, TinyLMConfig, config_from_dict)
from .fusion import CueGenerator, FusionBlock, SpoofClassifier, cue_loss
from .lmhead import ClsHeads, TinyLM
from .model import Batch, FasModel, collate
from .qformer import QFormerBranch
from .textproto import QuestionType, Vocabulary


class DivergenceError(RuntimeError):
    pass


@dataclass
class LossReport:
    content: float
    style: float
    cls: float
    cue: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


_TERM_WEIGHTS = (("content", "content"), ("style", "style"), ("cls", "cls"), ("cue", "cue"))


def total_loss(model: FasModel, batch: Batch, weights: LossWeights,
               noise_seed: int | None = None, training: bool = True,
               ) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum of the active per-term losses.

    The total is accumulated in float64 so the report's decomposition identity
    is exact; disabled components contribute exactly zero (their sub-networks
    are never executed).
    """
    terms = model.compute_losses(batch, noise_seed=noise_seed, training=training)
    for name, value in terms.items():
        if not bool(torch.isfinite(value)):
            raise DivergenceError(f"non-finite loss term: {name} = {float(value)}")
    total = None
    report_values = {}
    for key, wname in _TERM_WEIGHTS:
        if key in terms:
            contrib = getattr(weights, wname) * terms[key].double()
            total = contrib if total is None else total + contrib
            report_values[key] = float(terms[key].detach())
        else:
            report_values[key] = 0.0
    if total is None:  # classifier loss is always present, so this cannot happen
        raise DivergenceError("no active loss terms")
    report = LossReport(total=float(total.detach()), **report_values)
    return total, report


def one_cycle_lr(step: int, total_steps: int, base: float, peak: float,
                 warmup_frac: float = 0.3, final_frac: float = 0.1) -> float:
    """Linear warmup from base to peak, then cosine anneal to base*final_frac."""
    if total_steps <= 1:
        return base
    warmup = min(max(1, round(total_steps * warmup_frac)), total_steps - 1)
    if step < warmup:
        return base + (peak - base) * step / warmup
    final = base * final_frac
    t = (step - warmup) / (total_steps - warmup)
    return final + (peak - final) * 0.5 * (1.0 + math.cos(math.pi * t))


def build_optimizer(model: torch.nn.Module, weight_decay: float) -> torch.optim.AdamW:
    """AdamW with decay only on matrix-shaped trainable parameters; biases,
    norms and embeddings-as-vectors are excluded, as are all frozen tensors."""
    decay, no_decay = [], []
    for p in model.parameters():
        if not p.requires_grad:
            continue
        (decay if p.ndim >= 2 else no_decay).append(p)
    return torch.optim.AdamW([
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ], lr=0.0)


def split_hash(samples: list[synthdata.Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.image.tobytes())
        h.update(bytes([s.content_label]))
        h.update(",".join(map(str, s.style.codes())).encode())
    return h.hexdigest()[:16]


@dataclass
class FitResult:
    model: FasModel
    manifest: dict
    trace: list[dict]


def fit(cfg: RunConfig, samples: list[synthdata.Sample], lm: TinyLM | None,
        vocab: Vocabulary | None = None, out_dir: str | Path | None = None,
        log_every: int = 0) -> FitResult:
    """Train a model on the meta split; deterministic given the config seed."""
    torch.set_num_threads(1)
    seed = cfg.train.seed
    torch.manual_seed(seed)
    vocab = vocab or textproto.default_vocabulary()
    model = FasModel(cfg, vocab, lm)
    opt = build_optimizer(model, cfg.train.weight_decay)
    gen = torch.Generator().manual_seed(seed)

    n = len(samples)
    bs = cfg.train.batch_size
    steps_per_epoch = math.ceil(n / bs)
    total_steps = cfg.train.epochs * steps_per_epoch

    trace: list[dict] = []
    initial_total = None
    bad_streak = 0
    step = 0
    for _ in range(cfg.train.epochs):
        perm = torch.randperm(n, generator=gen).tolist()
        for start in range(0, n, bs):
            batch = collate([samples[i] for i in perm[start:start + bs]])
            lr = one_cycle_lr(step, total_steps, cfg.train.base_lr, cfg.train.peak_lr,
                              cfg.train.warmup_frac, cfg.train.final_lr_frac)
            for group in opt.param_groups:
                group["lr"] = lr
            total, report = total_loss(model, batch, cfg.weights,
                                       noise_seed=seed * 1_000_003 + step)
            opt.zero_grad()
            total.backward()
            opt.step()

            if initial_total is None:
                initial_total = max(report.total, 1e-8)
            if report.total > cfg.train.divergence_factor * initial_total:
                bad_streak += 1
                if bad_streak >= cfg.train.divergence_patience:
                    raise DivergenceError(
                        f"loss {report.total:.4g} stayed above "
                        f"{cfg.train.divergence_factor}x initial ({initial_total:.4g}) "
                        f"for {bad_streak} consecutive steps (step {step})")
            else:
                bad_streak = 0
            trace.append({"step": step, "lr": lr, **report.as_dict()})
            if log_every and step % log_every == 0:
                print(f"step {step}/{total_steps} lr {lr:.2e} total {report.total:.4f}")
            step += 1

    trace_blob = "\n".join(json.dumps(r, sort_keys=True) for r in trace)
    manifest = {
        "schema_version": ioutils.SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "data_hash": split_hash(samples),
        "lm_hash": ioutils.module_hash(lm) if lm is not None else None,
        "seed": seed,
        "steps": total_steps,
        "final": trace[-1],
        "trace_sha256": hashlib.sha256(trace_blob.encode()).hexdigest(),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        (out / "metrics.jsonl").write_text(trace_blob + "\n")
        save_checkpoint(model, out / "ckpt")
    return FitResult(model=model, manifest=manifest, trace=trace)


# -- checkpointing -----------------------------------------------------------------


def save_checkpoint(model: FasModel, path: str | Path, llm_free: bool = False) -> None:
    """Persist parameters as raw blobs + manifest; `llm_free` strips the LM."""
    state = {k: v for k, v in model.state_dict().items()}
    if llm_free:
        state = {k: v for k, v in state.items() if not k.startswith("lm.")}
    extra = {
        "config": model.cfg.to_dict(),
        "llm_free": llm_free or model.lm is None,
        "lm_hash": ioutils.module_hash(model.lm) if model.lm is not None and not llm_free else None,
    }
    out = Path(path)
    ioutils.save_state(state, out, extra=extra)
    model.vocab.save(out / "vocab.json")


def load_checkpoint(path: str | Path) -> FasModel:
    """Rebuild a model from a checkpoint directory (self-contained)."""
    state, manifest = ioutils.load_state(path)
    cfg = config_from_dict(manifest["config"])
    vocab = Vocabulary.load(Path(path) / "vocab.json")
    has_lm = any(k.startswith("lm.") for k in state)
    # a placeholder LM satisfies construction for LLM-free checkpoints and is
    # then detached so the score path runs without any LM tensors
    lm = TinyLM(cfg.lm, len(vocab)).freeze()
    model = FasModel(cfg, vocab, lm)
    if not has_lm:
        model.lm = None
    model.load_state_dict(state, strict=True)
    model.eval()
    return model


# -- gradient verification ------------------------------------------------------------


@dataclass
class GradcheckResult:
    component: str
    max_rel_err: float
    n_coords: int
    ok: bool
    worst: str = ""


def _rand_proj_loss(out: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    r = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    return (out * r).sum()


def _gradcheck_tensors(loss_fn, tensors: list[torch.Tensor], n_coords: int, tol: float,
                       seed: int, h: float = 1e-5) -> tuple[float, int, str]:
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [t.grad if t.grad is not None else torch.zeros_like(t) for t in tensors]

    gen = np.random.default_rng(seed)
    sizes = [t.numel() for t in tensors]
    total = sum(sizes)
    count = min(n_coords, total)
    flat_choices = gen.choice(total, size=count, replace=False)

    max_err, worst = 0.0, ""
    for flat in flat_choices:
        ti, offset = 0, int(flat)
        while offset >= sizes[ti]:
            offset -= sizes[ti]
            ti += 1
        t = tensors[ti]
        with torch.no_grad():
            orig = float(t.view(-1)[offset])
            t.view(-1)[offset] = orig + h
            up = float(loss_fn())
            t.view(-1)[offset] = orig - h
            down = float(loss_fn())
            t.view(-1)[offset] = orig
        fd = (up - down) / (2 * h)
        an = float(grads[ti].view(-1)[offset])
        denom = max(abs(fd), abs(an))
        err = 0.0 if denom < 1e-10 else abs(fd - an) / denom
        if err > max_err:
            max_err = err
            worst = f"tensor {ti} coord {offset}: analytic {an:.6e} fd {fd:.6e}"
    return max_err, count, worst


def _leaf(shape, gen, scale=1.0) -> torch.Tensor:
    t = torch.randn(*shape, generator=gen, dtype=torch.float64) * scale
    return t.requires_grad_(True)


def _component_setups(seed: int):
    """Builders: name -> (loss_fn, tensors to perturb). All float64."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    setups = {}

    table = torch.nn.Embedding(20, 8).double()
    ids = torch.randint(0, 20, (6,), generator=gen)
    setups["embedding"] = (
        lambda: _rand_proj_loss(textproto.embed(ids, table), torch.Generator().manual_seed(seed)),
        list(table.parameters()))

    msa = SelfAttention(8, 2).double()
    x1 = _leaf((1, 5, 8), gen)
    setups["msa"] = (
        lambda: _rand_proj_loss(msa(x1), torch.Generator().manual_seed(seed + 1)),
        list(msa.parameters()) + [x1])

    mca = CrossAttention(8, 2).double()
    x2, f2 = _leaf((1, 4, 8), gen), _leaf((1, 6, 8), gen)
    setups["mca"] = (
        lambda: _rand_proj_loss(mca(x2, f2), torch.Generator().manual_seed(seed + 2)),
        list(mca.parameters()) + [x2, f2])

    ffn = FeedForward(8).double()
    x3 = _leaf((2, 3, 8), gen)
    setups["ffn"] = (
        lambda: _rand_proj_loss(ffn(x3), torch.Generator().manual_seed(seed + 3)),
        list(ffn.parameters()) + [x3])

    enc = VisionEncoder(EncoderConfig(image_size=8, patch_size=4, depth=2, width=8, heads=2)).double()
    img = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64).requires_grad_(True)

    def enc_loss():
        bundle = enc.encode_bundle(img)
        return (_rand_proj_loss(bundle.f_c, torch.Generator().manual_seed(seed + 4))
                + _rand_proj_loss(bundle.f_s, torch.Generator().manual_seed(seed + 5)))

    setups["encoder"] = (enc_loss, list(enc.parameters()) + [img])

    qf = QFormerBranch(QFormerConfig(depth=2, heads=2, queries=2, width=8), d_lm=12).double()
    instr = _leaf((3, 8), gen, 0.5)
    feat = _leaf((1, 5, 8), gen)
    instr_lm = _leaf((3, 12), gen, 0.5)

    def qf_loss():
        out = qf(instr, feat)
        prompt = qf.soft_prompt(out.processed_queries, instr_lm)
        return _rand_proj_loss(prompt, torch.Generator().manual_seed(seed + 6))

    setups["qformer"] = (qf_loss, list(qf.parameters()) + [instr, feat, instr_lm])

    fus = FusionBlock(8, 2).double()
    qc, qs = _leaf((1, 2, 8), gen), _leaf((1, 2, 8), gen)
    fc = _leaf((1, 5, 8), gen)
    setups["fusion"] = (
        lambda: _rand_proj_loss(fus([qc, qs], fc).q_hat, torch.Generator().manual_seed(seed + 7)),
        list(fus.parameters()) + [qc, qs, fc])

    clf = SpoofClassifier(8).double()
    tcls = _leaf((4, 8), gen)
    labels = torch.tensor([0, 1, 1, 0])
    setups["classifier"] = (lambda: clf.loss(tcls, labels), list(clf.parameters()) + [tcls])

    heads = ClsHeads(8, {"content": 5, "style1_illumination": 4}).double()
    qh = _leaf((3, 2, 8), gen)
    hl = torch.tensor([0, 3, 2])
    setups["cls_head"] = (
        lambda: heads.loss(qh, hl, QuestionType.CONTENT)
        + heads.loss(qh, torch.tensor([1, 0, 3]), QuestionType.STYLE1),
        list(heads.parameters()) + [qh])

    cg = CueGenerator(8, FusionConfig(cue_grid=8, cue_channels=4)).double()
    tcue = _leaf((2, 3, 8), gen)
    target = torch.tensor([0.0, 1.0], dtype=torch.float64).view(2, 1, 1).expand(2, 8, 8)
    setups["cue"] = (
        lambda: cue_loss(cg(tcue, training=False), target, beta=0.5),
        list(cg.parameters()) + [tcue])

    setups["full_loss"] = _full_loss_setup(seed)
    return setups


def _full_loss_setup(seed: int):
    torch.manual_seed(seed + 100)
    raw = {
        "data": {"image_size": 8, "n_train": 4, "n_eval": 4, "granularity": 3},
        "encoder": {"image_size": 8, "patch_size": 4, "depth": 2, "width": 8, "heads": 2},
        "qformer": {"depth": 1, "heads": 2, "queries": 2, "width": 8},
        "lm": {"width": 16, "depth": 1, "heads": 2, "max_len": 96},
        "fusion": {"cue_grid": 8, "cue_channels": 4},
    }
    cfg = config_from_dict(raw)
    vocab = textproto.default_vocabulary()
    lm = TinyLM(cfg.lm, len(vocab)).double().freeze()
    model = FasModel(cfg, vocab, lm).double()
    spec = synthdata.meta_domain_spec(image_size=8, base_seed=seed)
    samples = synthdata.make_split(spec, 4)
    batch = collate(samples)
    batch.images = batch.images.double()
    batch.mask_values = batch.mask_values.double()
    weights = LossWeights()

    def loss_fn():
        return total_loss(model, batch, weights, noise_seed=seed, training=True)[0]

    return loss_fn, [p for p in model.parameters() if p.requires_grad]


def gradcheck(components: list[str] | None = None, trials: int = 64,
              tolerance: float = 1e-4, seed: int = 0) -> list[GradcheckResult]:
    """Central finite differences vs autograd on random coordinates per component."""
    setups = _component_setups(seed)
    names = components or list(setups)
    results = []
    for name in names:
        if name not in setups:
            raise ValueError(f"unknown gradcheck component: {name} (have {sorted(setups)})")
        loss_fn, tensors = setups[name]
        err, n, worst = _gradcheck_tensors(loss_fn, tensors, trials, tolerance, seed)
        results.append(GradcheckResult(component=name, max_rel_err=err, n_coords=n,
                                       ok=err <= tolerance, worst="" if err <= tolerance else worst))
    return results
