"""Instruction templates, option rendering, and a closed-vocabulary word tokenizer.

The text universe is tiny and closed (question templates x option lists), so a
deterministic word-level tokenizer round-trips everything and never emits UNK
for in-scope text.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import torch

from . import synthdata


class QuestionType(str, Enum):
    CONTENT = "content"
    STYLE1 = "style1_illumination"
    STYLE2 = "style2_environment"
    STYLE3 = "style3_camera"
    BINARY = "binary"


STYLE_QUESTIONS = (QuestionType.STYLE1, QuestionType.STYLE2, QuestionType.STYLE3)

PREFIX = "Choose the correct option for the following question:"

_QUESTION_BODY = {
    QuestionType.CONTENT: "Which type of spoof is in this image?",
    QuestionType.STYLE1: "What is the illumination condition in this image?",
    QuestionType.STYLE2: "What is the environment in this image?",
    QuestionType.STYLE3: "What is the camera quality in this image?",
    QuestionType.BINARY: "Is this a real face?",
}

_CONTENT_OPTIONS = {
    3: ["Real face", "Photo", "Poster", "A4-paper", "2D face mask", "2D upper-body mask",
        "2D region mask", "PC screen", "Pad screen", "Phone screen", "3D mask"],
    2: ["Real face", "Photo", "Printed paper", "2D face mask", "2D body or region mask",
        "PC screen", "Handheld screen", "3D mask"],
    1: ["Real face", "Print", "2D mask", "Replay", "3D mask"],
}

_STYLE1_OPTIONS = ["Normal", "Strong", "Back", "Dark"]
_STYLE2_OPTIONS = ["Indoor", "Outdoor"]
_STYLE3_OPTIONS = ["Low", "Medium", "High"]
_BINARY_OPTIONS = ["Yes", "No"]

# hint carriers used to build the text-only LM pretraining corpus; {} holds the
# bare option text, placed at varying positions so the frozen LM tolerates
# prefix layout changes
LM_CARRIERS = (
    "{} . {q}",
    "this is {} . {q}",
    "{q} this is {} .",
    "{q} the image shows {} .",
)


def bare_options(qtype: QuestionType, granularity: int = 3) -> list[str]:
    if qtype == QuestionType.CONTENT:
        if granularity not in _CONTENT_OPTIONS:
            raise ValueError(f"granularity must be in {{1, 2, 3}}, got {granularity}")
        return list(_CONTENT_OPTIONS[granularity])
    if qtype == QuestionType.STYLE1:
        return list(_STYLE1_OPTIONS)
    if qtype == QuestionType.STYLE2:
        return list(_STYLE2_OPTIONS)
    if qtype == QuestionType.STYLE3:
        return list(_STYLE3_OPTIONS)
    if qtype == QuestionType.BINARY:
        return list(_BINARY_OPTIONS)
    raise ValueError(f"unknown question type: {qtype}")


def build_question(qtype: QuestionType, granularity: int = 3) -> tuple[str, list[str]]:
    """Full (prefixed) question text and its numbered option list."""
    text = f"{PREFIX} {_QUESTION_BODY[qtype]}"
    options = [f"({i + 1}) {opt}" for i, opt in enumerate(bare_options(qtype, granularity))]
    return text, options


def answer_for(qtype: QuestionType, sample: synthdata.Sample, granularity: int = 3) -> str:
    """The ground-truth option string for a sample under this question."""
    _, options = build_question(qtype, granularity)
    if qtype == QuestionType.CONTENT:
        return options[synthdata.coarsen_label(sample.content_label, granularity)]
    if qtype == QuestionType.STYLE1:
        return options[sample.style.codes()[0]]
    if qtype == QuestionType.STYLE2:
        return options[sample.style.codes()[1]]
    if qtype == QuestionType.STYLE3:
        return options[sample.style.codes()[2]]
    if qtype == QuestionType.BINARY:
        return options[0] if sample.content_label == 0 else options[1]
    raise ValueError(f"unknown question type: {qtype}")


# -- tokenizer -----------------------------------------------------------------

PAD, BOS, EOS, UNK = 0, 1, 2, 3
_SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def split_words(text: str) -> list[str]:
    """Lowercase and split into alphanumeric runs and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Closed token->id map; specials at ids 0-3, rest sorted lexicographically."""

    def __init__(self, tokens: list[str]):
        self.id_to_token = list(_SPECIALS) + sorted(set(tokens) - set(_SPECIALS))
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def tokenize(self, text: str, strict: bool = True) -> list[int]:
        ids = [BOS]
        for word in split_words(text):
            tid = self.token_to_id.get(word)
            if tid is None:
                if strict:
                    raise ValueError(f"token outside vocabulary: {word!r}")
                tid = UNK
            ids.append(tid)
        ids.append(EOS)
        return ids

    def detokenize(self, ids: list[int]) -> str:
        words = [self.id_to_token[i] for i in ids if i not in (PAD, BOS, EOS)]
        return " ".join(words)

    def canonical(self, text: str) -> str:
        """Canonical single-spaced lowercase form used for answer comparison."""
        return self.detokenize(self.tokenize(text, strict=False))

    def to_json(self) -> str:
        return json.dumps({"tokens": self.id_to_token}, indent=1)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def from_json(blob: str) -> "Vocabulary":
        tokens = json.loads(blob)["tokens"]
        vocab = Vocabulary([])
        vocab.id_to_token = tokens
        vocab.token_to_id = {t: i for i, t in enumerate(tokens)}
        return vocab

    @staticmethod
    def load(path: str | Path) -> "Vocabulary":
        return Vocabulary.from_json(Path(path).read_text())


def _vocab_corpus() -> list[str]:
    strings = [PREFIX]
    strings.extend(_QUESTION_BODY.values())
    for granularity in (1, 2, 3):
        strings.extend(bare_options(QuestionType.CONTENT, granularity))
    strings.extend(_STYLE1_OPTIONS + _STYLE2_OPTIONS + _STYLE3_OPTIONS + _BINARY_OPTIONS)
    strings.extend(c.replace("{}", "").replace("{q}", "") for c in LM_CARRIERS)
    for i in range(1, 12):
        strings.append(f"({i})")
    return strings


def default_vocabulary() -> Vocabulary:
    """Vocabulary over every in-scope template, option, and carrier string."""
    tokens: list[str] = []
    for s in _vocab_corpus():
        tokens.extend(split_words(s))
    return Vocabulary(tokens)


# -- instruction records ---------------------------------------------------------


@dataclass
class InstructionRecord:
    qtype: QuestionType
    question_text: str
    options: list[str]
    answer_text: str
    question_tokens: list[int]
    answer_tokens: list[int]


def make_record(qtype: QuestionType, sample: synthdata.Sample, vocab: Vocabulary,
                granularity: int = 3) -> InstructionRecord:
    question_text, options = build_question(qtype, granularity)
    answer_text = answer_for(qtype, sample, granularity)
    return InstructionRecord(
        qtype=qtype,
        question_text=question_text,
        options=options,
        answer_text=answer_text,
        question_tokens=vocab.tokenize(question_text),
        answer_tokens=vocab.tokenize(answer_text),
    )


def embed(tokens: list[int] | torch.Tensor, table: torch.nn.Embedding) -> torch.Tensor:
    """Look up token embeddings; row i is exactly the table row of token i."""
    ids = torch.as_tensor(tokens, dtype=torch.long)
    if ids.numel() and int(ids.max()) >= table.num_embeddings:
        raise ValueError(f"token id {int(ids.max())} out of range for table "
                         f"of size {table.num_embeddings}")
    if ids.numel() and int(ids.min()) < 0:
        raise ValueError("negative token id")
    return table(ids)
