"""Composite dual-branch model: encoder -> instruction-conditioned branches ->
query fusion -> classifier / cue generator, with the frozen decoder attached
for answer supervision.

The fake-score path never touches the language model, so inference can run
with the LM stripped and produce bit-identical scores.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import lmhead, synthdata, textproto
from .backbone import VisionEncoder
from .config import ModelToggles, RunConfig
from .fusion import CueGenerator, FusionBlock, SpoofClassifier, cue_loss, mask_to_cue_target
from .lmhead import ClsHeads, TinyLM
from .qformer import QFormerBranch
from .textproto import QuestionType, Vocabulary


@dataclass
class Batch:
    images: torch.Tensor          # (B, 3, H, W)
    content_labels: torch.Tensor  # (B,) raw labels 0..10
    style_codes: torch.Tensor     # (B, 3)
    mask_values: torch.Tensor     # (B,) constant mask value per sample


def collate(samples: list[synthdata.Sample]) -> Batch:
    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2)
    return Batch(
        images=images.contiguous(),
        content_labels=torch.tensor([s.content_label for s in samples], dtype=torch.long),
        style_codes=torch.tensor([s.style.codes() for s in samples], dtype=torch.long),
        mask_values=torch.tensor([float(s.mask.flat[0]) for s in samples]),
    )


@dataclass
class ForwardState:
    """Intermediate activations shared between the loss and score paths."""
    f_c: torch.Tensor
    f_s: torch.Tensor | None
    content_queries: torch.Tensor | None
    style_queries: list[torch.Tensor]
    t_cls: torch.Tensor
    t_cue: torch.Tensor | None


@dataclass
class InferResult:
    fake_scores: list[float]
    answers: list[dict[str, str]]
    cue_maps: np.ndarray | None


class FasModel(nn.Module):
    def __init__(self, cfg: RunConfig, vocab: Vocabulary, lm: TinyLM | None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        self.toggles: ModelToggles = cfg.toggles()
        tg = self.toggles
        if tg.head_mode == "frozen_lm" and lm is None:
            raise ValueError("frozen_lm head mode requires a pretrained LM")
        if lm is not None and not lm.frozen:
            raise ValueError("the LM must be frozen before main training")

        d = cfg.encoder.width
        self.encoder = VisionEncoder(cfg.encoder)
        self.instr_embed = nn.Embedding(len(vocab), d)
        nn.init.normal_(self.instr_embed.weight, std=0.02)

        self.content_qtype = QuestionType.BINARY if tg.binary else QuestionType.CONTENT
        self.style_qtypes = list(textproto.STYLE_QUESTIONS[: tg.style_prompt_count])
        self.granularity = cfg.data.granularity

        self.content_branch = QFormerBranch(cfg.qformer, cfg.lm.width) if tg.content_branch else None
        self.style_branch = QFormerBranch(cfg.qformer, cfg.lm.width) if tg.style_branch else None
        if tg.content_branch or tg.style_branch:
            self.fusion = FusionBlock(d, cfg.qformer.heads, cfg.qformer.ffn_mult)
        else:
            self.fusion = None
        self.classifier = SpoofClassifier(d)
        self.cue_gen = CueGenerator(d, cfg.fusion) if tg.cue else None

        self.lm = lm
        if tg.head_mode == "cls_head":
            spec = {}
            if tg.content_branch:
                spec[self.content_qtype.value] = len(
                    textproto.bare_options(self.content_qtype, self.granularity))
            if tg.style_branch:
                for q in self.style_qtypes:
                    spec[q.value] = len(textproto.bare_options(q))
            self.cls_heads = ClsHeads(d, spec)
        else:
            self.cls_heads = None

        # constant instruction token ids and per-label answer token ids
        self._instr_ids: dict[str, torch.Tensor] = {}
        self._answers: dict[str, list[list[int]]] = {}
        for qtype in self.active_qtypes():
            gran = self.granularity if qtype == QuestionType.CONTENT else 3
            text, options = textproto.build_question(qtype, gran)
            ids = torch.tensor(vocab.tokenize(text), dtype=torch.long)
            self.register_buffer(f"instr_{qtype.name}", ids, persistent=False)
            self._instr_ids[qtype.value] = ids
            self._answers[qtype.value] = [vocab.tokenize(opt) for opt in options]

    # -- wiring ------------------------------------------------------------------

    def active_qtypes(self) -> list[QuestionType]:
        out = []
        if self.toggles.content_branch:
            out.append(self.content_qtype)
        if self.toggles.style_branch:
            out.extend(self.style_qtypes)
        return out

    def question_labels(self, batch: Batch, qtype: QuestionType) -> torch.Tensor:
        """Option index (= label) of each sample for a question type."""
        if qtype == QuestionType.CONTENT:
            return torch.tensor(
                [synthdata.coarsen_label(int(l), self.granularity)
                 for l in batch.content_labels], dtype=torch.long)
        if qtype == QuestionType.BINARY:
            return (batch.content_labels != 0).long()
        idx = {QuestionType.STYLE1: 0, QuestionType.STYLE2: 1, QuestionType.STYLE3: 2}[qtype]
        return batch.style_codes[:, idx]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    # -- forward paths -------------------------------------------------------------

    def _branch_pass(self, branch: QFormerBranch, qtype: QuestionType,
                     feat: torch.Tensor) -> torch.Tensor:
        instr = textproto.embed(self._instr_ids[qtype.value], self.instr_embed)
        return branch(instr, feat).processed_queries

    def forward_state(self, images: torch.Tensor) -> ForwardState:
        bundle = self.encoder.encode_bundle(images)
        content_q = None
        style_qs: list[torch.Tensor] = []
        if self.content_branch is not None:
            content_q = self._branch_pass(self.content_branch, self.content_qtype, bundle.f_c)
        if self.style_branch is not None:
            for qtype in self.style_qtypes:
                style_qs.append(self._branch_pass(self.style_branch, qtype, bundle.f_s))
        if self.fusion is not None:
            queries = []
            if content_q is not None:
                queries.append(content_q)
            if style_qs:
                queries.append(torch.stack(style_qs).mean(dim=0))
            fused = self.fusion(queries, bundle.f_c)
            t_cls, t_cue = fused.t_cls, fused.t_cue
        else:
            t_cls, t_cue = bundle.f_c[:, 0, :], None
        return ForwardState(f_c=bundle.f_c, f_s=bundle.f_s, content_queries=content_q,
                            style_queries=style_qs, t_cls=t_cls, t_cue=t_cue)

    def _question_loss(self, queries: torch.Tensor, branch: QFormerBranch,
                       qtype: QuestionType, labels: torch.Tensor) -> torch.Tensor:
        if self.toggles.head_mode == "cls_head":
            return self.cls_heads.loss(queries, labels, qtype)
        instr_ids = self._instr_ids[qtype.value]
        instr_lm = self.lm.embed_tokens(instr_ids)
        prompt = branch.soft_prompt(queries, instr_lm)
        answer_ids = lmhead.pad_answers(
            [self._answers[qtype.value][int(l)] for l in labels])
        return lmhead.answer_loss(self.lm, prompt, answer_ids)

    def compute_losses(self, batch: Batch, noise_seed: int | None = None,
                       training: bool = True) -> dict[str, torch.Tensor]:
        """Per-term mean losses; ablated terms are absent from the dict."""
        state = self.forward_state(batch.images)
        losses: dict[str, torch.Tensor] = {}
        if self.content_branch is not None:
            labels = self.question_labels(batch, self.content_qtype)
            losses["content"] = self._question_loss(
                state.content_queries, self.content_branch, self.content_qtype, labels)
        if self.style_branch is not None:
            style_terms = []
            for qtype, queries in zip(self.style_qtypes, state.style_queries):
                labels = self.question_labels(batch, qtype)
                style_terms.append(self._question_loss(queries, self.style_branch, qtype, labels))
            losses["style"] = torch.stack(style_terms).mean()
        losses["cls"] = self.classifier.loss(state.t_cls, (batch.content_labels != 0).long())
        if self.cue_gen is not None:
            p_cue = self.cue_gen(state.t_cue, training=training, noise_seed=noise_seed)
            target = mask_to_cue_target(batch.mask_values, self.cfg.fusion.cue_grid)
            losses["cue"] = cue_loss(p_cue, target, self.cfg.fusion.beta,
                                     self.cfg.fusion.cue_smooth_continuous)
        return losses

    @torch.no_grad()
    def fake_scores(self, images: torch.Tensor) -> torch.Tensor:
        """LLM-free score path: (B,) spoof probabilities."""
        state = self.forward_state(images)
        return self.classifier.fake_score(state.t_cls)

    @torch.no_grad()
    def decode_answers(self, images: torch.Tensor) -> list[dict[str, str]]:
        """Per-question decoded answers (canonical text) for each image."""
        state = self.forward_state(images)
        b = images.shape[0]
        out: list[dict[str, str]] = [dict() for _ in range(b)]
        pairs: list[tuple[QuestionType, QFormerBranch, torch.Tensor]] = []
        if self.content_branch is not None:
            pairs.append((self.content_qtype, self.content_branch, state.content_queries))
        if self.style_branch is not None:
            pairs.extend(
                (q, self.style_branch, s) for q, s in zip(self.style_qtypes, state.style_queries))
        for qtype, branch, queries in pairs:
            if self.toggles.head_mode == "cls_head":
                pred = self.cls_heads.logits(queries, qtype).argmax(dim=-1)
                gran = self.granularity if qtype == QuestionType.CONTENT else 3
                _, options = textproto.build_question(qtype, gran)
                decoded = [self.vocab.canonical(options[int(i)]) for i in pred]
            else:
                instr_lm = self.lm.embed_tokens(self._instr_ids[qtype.value])
                prompt = branch.soft_prompt(queries, instr_lm)
                decoded = lmhead.decode_answer(self.lm, prompt, self.vocab)
            for i, text in enumerate(decoded):
                out[i][qtype.value] = text
        return out

    @torch.no_grad()
    def infer(self, images: torch.Tensor, decode: bool = True) -> InferResult:
        state = self.forward_state(images)
        scores = self.classifier.fake_score(state.t_cls)
        cue = None
        if self.cue_gen is not None and state.t_cue is not None:
            cue = self.cue_gen(state.t_cue, training=False).cpu().numpy()
        answers = self.decode_answers(images) if decode and self._can_decode() else \
            [dict() for _ in range(images.shape[0])]
        return InferResult(fake_scores=[float(s) for s in scores],
                           answers=answers, cue_maps=cue)

    def _can_decode(self) -> bool:
        has_branch = self.content_branch is not None or self.style_branch is not None
        head_ok = self.toggles.head_mode == "cls_head" or self.lm is not None
        return has_branch and head_ok

    def answer_accuracy(self, samples: list[synthdata.Sample], qtype: QuestionType,
                        batch_size: int = 64) -> tuple[float, float]:
        """(accuracy, malformed rate) of decoded answers against gold options."""
        gran = self.granularity if qtype == QuestionType.CONTENT else 3
        _, options = textproto.build_question(qtype, gran)
        option_set = {self.vocab.canonical(o) for o in options}
        correct = malformed = 0
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            batch = collate(chunk)
            decoded = self.decode_answers(batch.images)
            for s, ans in zip(chunk, decoded):
                gold = self.vocab.canonical(textproto.answer_for(qtype, s, gran))
                text = ans.get(qtype.value, "")
                if text == gold:
                    correct += 1
                if text not in option_set:
                    malformed += 1
        n = len(samples)
        return correct / n, malformed / n
