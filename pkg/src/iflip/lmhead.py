"""Answer prediction: a frozen tiny causal decoder plus the classification-head
variant.

The decoder is pretrained on text-only QA before the main model ever sees it:
each corpus pair embeds the gold option's bare text in the question via a hint
carrier, so the decoder's competence is mapping semantic cues in its prefix to
the formatted "(i) <option>" answer. During main training the query transformer
has to steer that frozen competence through the soft prompt alone.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ioutils, textproto
from .attention import TransformerBlock
from .config import TinyLMConfig
from .ioutils import module_hash
from .textproto import (BOS, EOS, PAD, LM_CARRIERS, QuestionType, Vocabulary,
                        bare_options, build_question)


class LMTrainingError(RuntimeError):
    """Pretraining failed to reach the competence bar within the step budget."""


class TinyLM(nn.Module):
    """Decoder-only causal transformer over the closed vocabulary."""

    def __init__(self, cfg: TinyLMConfig, vocab_size: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.tok_embed = nn.Embedding(vocab_size, cfg.width)
        self.pos_embed = nn.Parameter(torch.empty(1, cfg.max_len, cfg.width))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads, cfg.ffn_mult, causal=True)
            for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, vocab_size)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def freeze(self) -> "TinyLM":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def forward_embeds(self, embeds: torch.Tensor) -> torch.Tensor:
        """(B, T, d_lm) input rows -> (B, T, V) next-token logits."""
        t = embeds.shape[1]
        if t > self.cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        h = embeds + self.pos_embed[:, :t, :]
        for block in self.blocks:
            h = block(h)
        return self.head(self.final_norm(h))

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok_embed(ids)


def pad_answers(answers: list[list[int]], device=None) -> torch.Tensor:
    """Right-pad BOS...EOS answer id lists into a (B, A) long tensor."""
    width = max(len(a) for a in answers)
    out = torch.full((len(answers), width), PAD, dtype=torch.long, device=device)
    for i, a in enumerate(answers):
        out[i, : len(a)] = torch.as_tensor(a, dtype=torch.long)
    return out


def _answer_logits_targets(lm: TinyLM, prefix_embeds: torch.Tensor,
                           answer_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Teacher-forced pass; returns (logits over answer positions, targets).

    `answer_ids` rows are [BOS, a_1..a_m, EOS, PAD...]; position P+i (holding
    the embedding of answer input token i) predicts answer token i+1, so the
    model is scored on a_1..a_m and the closing EOS.
    """
    if prefix_embeds.dim() == 2:
        prefix_embeds = prefix_embeds.unsqueeze(0)
    p = prefix_embeds.shape[1]
    inputs = answer_ids[:, :-1]
    targets = answer_ids[:, 1:].clone()
    targets[inputs == PAD] = PAD  # past-the-end rows of padded answers
    embeds = torch.cat([prefix_embeds, lm.embed_tokens(inputs)], dim=1)
    logits = lm.forward_embeds(embeds)[:, p:, :]
    return logits, targets


def answer_loss(lm: TinyLM, prefix_embeds: torch.Tensor,
                answer_ids: torch.Tensor) -> torch.Tensor:
    """Teacher-forced cross-entropy over answer token positions (mean).

    Gradients flow into `prefix_embeds` (the soft prompt) only; the LM is
    frozen by contract once pretrained.
    """
    logits, targets = _answer_logits_targets(lm, prefix_embeds, answer_ids)
    return F.cross_entropy(logits.reshape(-1, lm.vocab_size), targets.reshape(-1),
                           ignore_index=PAD)


def answer_token_accuracy(lm: TinyLM, prefix_embeds: torch.Tensor,
                          answer_ids: torch.Tensor) -> tuple[int, int]:
    """(correct, total) argmax accuracy over non-pad answer positions."""
    with torch.no_grad():
        logits, targets = _answer_logits_targets(lm, prefix_embeds, answer_ids)
        mask = targets != PAD
        pred = logits.argmax(dim=-1)
        return int((pred.eq(targets) & mask).sum()), int(mask.sum())


def decode_answer(lm: TinyLM, prefix_embeds: torch.Tensor, vocab: Vocabulary) -> list[str]:
    """Greedy decoding from a (B, P, d_lm) soft prompt; deterministic."""
    if prefix_embeds.dim() == 2:
        prefix_embeds = prefix_embeds.unsqueeze(0)
    b = prefix_embeds.shape[0]
    ids = torch.full((b, 1), BOS, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    with torch.no_grad():
        for _ in range(lm.cfg.max_answer_len):
            embeds = torch.cat([prefix_embeds, lm.embed_tokens(ids)], dim=1)
            nxt = lm.forward_embeds(embeds)[:, -1, :].argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
            ids = torch.cat([ids, nxt.unsqueeze(1)], dim=1)
            done |= nxt.eq(EOS)
            if bool(done.all()):
                break
    return [vocab.detokenize([t for t in row.tolist() if t != EOS]) for row in ids]


# -- pretraining corpus ----------------------------------------------------------


@dataclass
class LMPair:
    qtype: QuestionType
    granularity: int
    opt_index: int
    carrier: int
    prefix_ids: list[int]
    answer_ids: list[int]
    held_out: bool


def build_lm_corpus(vocab: Vocabulary, granularities: tuple[int, ...] = (3,)) -> list[LMPair]:
    """Every (question type, option) pair rendered through each hint carrier.

    One carrier per option is held out to measure generalization across
    phrasings rather than memorization.
    """
    pairs: list[LMPair] = []
    qtypes: list[tuple[QuestionType, int]] = [(QuestionType.CONTENT, g) for g in granularities]
    qtypes += [(q, 3) for q in textproto.STYLE_QUESTIONS] + [(QuestionType.BINARY, 3)]
    for ti, (qtype, gran) in enumerate(qtypes):
        question_text, options = build_question(qtype, gran)
        for oi, bare in enumerate(bare_options(qtype, gran)):
            held = (ti * 13 + oi) % len(LM_CARRIERS)
            for ci, carrier in enumerate(LM_CARRIERS):
                text = carrier.format(bare, q=question_text)
                pairs.append(LMPair(
                    qtype=qtype,
                    granularity=gran,
                    opt_index=oi,
                    carrier=ci,
                    prefix_ids=vocab.tokenize(text),
                    answer_ids=vocab.tokenize(options[oi]),
                    held_out=(ci == held),
                ))
    return pairs


def _batch_loss(lm: TinyLM, batch: list[LMPair]) -> torch.Tensor:
    """Pad prefixes per-row before the answer so one padded pass covers the batch."""
    max_p = max(len(p.prefix_ids) for p in batch)
    rows, answers = [], []
    for p in batch:
        rows.append(p.prefix_ids + [PAD] * (max_p - len(p.prefix_ids)))
        answers.append(p.answer_ids)
    prefix = lm.embed_tokens(torch.as_tensor(rows, dtype=torch.long))
    return answer_loss(lm, prefix, pad_answers(answers))


def _held_out_metrics(lm: TinyLM, held: list[LMPair], vocab: Vocabulary) -> tuple[float, list[LMPair]]:
    correct = total = 0
    bad: list[LMPair] = []
    for p in held:
        prefix = lm.embed_tokens(torch.as_tensor([p.prefix_ids], dtype=torch.long))
        c, t = answer_token_accuracy(lm, prefix, pad_answers([p.answer_ids]))
        correct, total = correct + c, total + t
        decoded = decode_answer(lm, prefix, vocab)[0]
        if decoded != vocab.detokenize(p.answer_ids):
            bad.append(p)
    return correct / max(total, 1), bad


def pretrain_tiny_lm(vocab: Vocabulary, cfg: TinyLMConfig,
                     corpus: list[LMPair] | None = None,
                     seed: int | None = None) -> tuple[TinyLM, dict]:
    """Train the decoder on text-only QA until held-out competence, then freeze."""
    seed = cfg.pretrain_seed if seed is None else seed
    torch.manual_seed(seed)
    if corpus is None:
        corpus = build_lm_corpus(vocab)
    train = [p for p in corpus if not p.held_out]
    held = [p for p in corpus if p.held_out]
    if not train or not held:
        raise ValueError("corpus must contain both training and held-out pairs")

    lm = TinyLM(cfg, len(vocab))
    opt = torch.optim.AdamW(lm.parameters(), lr=cfg.pretrain_lr)
    gen = torch.Generator().manual_seed(seed)

    acc, bad = 0.0, held
    step = 0
    order: list[int] = []
    while step < cfg.pretrain_steps:
        if len(order) < cfg.pretrain_batch:
            order += torch.randperm(len(train), generator=gen).tolist()
        batch = [train[i] for i in order[: cfg.pretrain_batch]]
        order = order[cfg.pretrain_batch:]
        loss = _batch_loss(lm, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        step += 1
        if step % 100 == 0 or step == cfg.pretrain_steps:
            lm.eval()
            acc, bad = _held_out_metrics(lm, held, vocab)
            lm.train()
            if acc >= cfg.target_acc and not bad:
                break
    if acc < cfg.target_acc or bad:
        raise LMTrainingError(
            f"held-out token accuracy {acc:.4f} (target {cfg.target_acc}) after "
            f"{step} steps; {len(bad)} held-out pairs decode incorrectly: "
            + ", ".join(f"{p.qtype.value}/opt{p.opt_index}" for p in bad[:5]))
    lm.freeze()
    report = {
        "steps": step,
        "held_out_token_acc": acc,
        "decode_exact": not bad,
        "n_train_pairs": len(train),
        "n_held_out_pairs": len(held),
        "lm_hash": module_hash(lm),
        "seed": seed,
    }
    return lm, report


def save_lm(lm: TinyLM, vocab: Vocabulary, path: str | Path,
            report: dict | None = None) -> None:
    """Persist the frozen LM as its own checkpoint with a content hash."""
    out = Path(path)
    extra = {
        "lm_config": dataclasses.asdict(lm.cfg),
        "lm_hash": module_hash(lm),
        "report": report or {},
    }
    ioutils.save_state(dict(lm.state_dict()), out, extra=extra)
    vocab.save(out / "vocab.json")


def load_lm(path: str | Path) -> tuple[TinyLM, Vocabulary, dict]:
    state, manifest = ioutils.load_state(path)
    vocab = Vocabulary.load(Path(path) / "vocab.json")
    lm = TinyLM(TinyLMConfig(**manifest["lm_config"]), len(vocab))
    lm.load_state_dict(state)
    lm.freeze()
    return lm, vocab, manifest


# -- classification-head variant ---------------------------------------------------


class ClsHeads(nn.Module):
    """One linear head per question type over mean-pooled processed queries."""

    def __init__(self, d: int, options_per_qtype: dict[str, int]):
        super().__init__()
        self.heads = nn.ModuleDict(
            {key: nn.Linear(d, n) for key, n in options_per_qtype.items()})

    def logits(self, processed_queries: torch.Tensor, qtype: QuestionType) -> torch.Tensor:
        return self.heads[qtype.value](processed_queries.mean(dim=1))

    def loss(self, processed_queries: torch.Tensor, labels: torch.Tensor,
             qtype: QuestionType) -> torch.Tensor:
        logits = self.logits(processed_queries, qtype)
        if labels.numel() and (int(labels.max()) >= logits.shape[-1] or int(labels.min()) < 0):
            raise ValueError(f"label out of range for {qtype.value}: {labels.tolist()}")
        return F.cross_entropy(logits, labels)
