"""Trainable OCR post-correction: a character noisy-channel corrector.

Training aligns user-corrected pages against first-pass OCR output,
estimates a smoothed character confusion channel plus a character trigram
language model over the corrected text, and keeps an inventory of edits
seen often enough to trust. Decoding beam-searches over monotone edit
sequences maximizing channel log-likelihood plus weighted LM log-prior.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

from annolab.kernels import levenshtein, levenshtein_matrix
from annolab.model import (
    ExecutionMode,
    InputKind,
    OutputKind,
    PluginManifest,
    TaskKind,
    TaskSpec,
)
from annolab.plugins import CancelProbe, LogFn, PluginInputError, TaskCancelled

EPS = ""  # the empty symbol: a deleted true char or a spurious observed char
BOS_ID = -1  # line-begin sentinel (two per line), never predicted
EOS_ID = -2  # line-end sentinel, part of the LM vocabulary


@dataclass(frozen=True)
class EditOp:
    kind: str  # copy | substitute | delete_true | insert_obs
    true_c: str = ""
    obs_c: str = ""


def copy_op(c: str) -> EditOp:
    return EditOp("copy", c, c)


def substitute(true_c: str, obs_c: str) -> EditOp:
    return EditOp("substitute", true_c, obs_c)


def delete_true(true_c: str) -> EditOp:
    return EditOp("delete_true", true_c, "")


def insert_obs(obs_c: str) -> EditOp:
    return EditOp("insert_obs", "", obs_c)


def align(obs: str, true: str) -> list[EditOp]:
    """Minimal unit-cost edit script turning `true` into `obs`.

    Among equal-cost scripts the backtrace prefers, at every step,
    copy > substitute > delete_true > insert_obs.
    """
    d = levenshtein_matrix(obs, true)
    ops: list[EditOp] = []
    i, j = len(obs), len(true)
    while i > 0 or j > 0:
        here = d[i, j]
        if i > 0 and j > 0 and obs[i - 1] == true[j - 1] and d[i - 1, j - 1] == here:
            ops.append(copy_op(true[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and d[i - 1, j - 1] + 1 == here:
            ops.append(substitute(true[j - 1], obs[i - 1]))
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j - 1] + 1 == here:
            ops.append(delete_true(true[j - 1]))
            j -= 1
        else:
            ops.append(insert_obs(obs[i - 1]))
            i -= 1
    ops.reverse()
    return ops


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    alpha_lm: float = 0.1
    min_count: int = 2
    beam_width: int = 16
    lm_weight: float = 1.0

    @classmethod
    def from_params(cls, params: dict[str, Any]) -> "TrainConfig":
        kwargs = {}
        for field_name, caster in (
            ("alpha", float),
            ("alpha_lm", float),
            ("min_count", int),
            ("beam_width", int),
            ("lm_weight", float),
        ):
            if field_name in params:
                kwargs[field_name] = caster(params[field_name])
        cfg = cls(**kwargs)
        if cfg.alpha <= 0 or cfg.alpha_lm <= 0:
            raise PluginInputError("smoothing constants must be positive")
        if cfg.min_count < 1 or cfg.beam_width < 1:
            raise PluginInputError("min_count and beam_width must be >= 1")
        return cfg


class ChannelModel:
    """P(observed symbol | true symbol) with add-alpha smoothing.

    Rows and columns range over the training alphabet plus the empty
    symbol, so every row distribution sums to one over alphabet+epsilon.
    """

    def __init__(
        self, counts: dict[str, dict[str, int]], alphabet: frozenset[str], alpha: float
    ) -> None:
        self.counts = counts
        self.alphabet = alphabet
        self.alpha = alpha
        self.v = len(alphabet) + 1
        self._totals = {t: sum(row.values()) for t, row in counts.items()}
        self._logp: dict[tuple[str, str], float] = {}

    def prob(self, true_sym: str, obs_sym: str) -> float:
        count = self.counts.get(true_sym, {}).get(obs_sym, 0)
        total = self._totals.get(true_sym, 0)
        return (count + self.alpha) / (total + self.alpha * self.v)

    def logp(self, true_sym: str, obs_sym: str) -> float:
        key = (true_sym, obs_sym)
        cached = self._logp.get(key)
        if cached is None:
            cached = math.log(self.prob(true_sym, obs_sym))
            self._logp[key] = cached
        return cached


class CharLM:
    """Character trigram model over corrected lines.

    Each line is padded with two begin sentinels and one end sentinel;
    symbols are Unicode codepoints, sentinels negative ints. Distributions
    are add-alpha smoothed over vocabulary = ref characters + end sentinel.
    """

    def __init__(
        self,
        context_counts: dict[tuple[int, int], dict[int, int]],
        vocab: frozenset[int],
        alpha: float,
    ) -> None:
        self.context_counts = context_counts
        self.vocab = vocab
        self.alpha = alpha
        self._totals = {ctx: sum(row.values()) for ctx, row in context_counts.items()}
        self._logp: dict[tuple[int, int, int], float] = {}

    def prob_id(self, ctx: tuple[int, int], sym: int) -> float:
        count = self.context_counts.get(ctx, {}).get(sym, 0)
        total = self._totals.get(ctx, 0)
        return (count + self.alpha) / (total + self.alpha * len(self.vocab))

    def logp_id(self, ctx: tuple[int, int], sym: int) -> float:
        key = (ctx[0], ctx[1], sym)
        cached = self._logp.get(key)
        if cached is None:
            cached = math.log(self.prob_id(ctx, sym))
            self._logp[key] = cached
        return cached


def _build_inventory(
    counts: dict[str, dict[str, int]], min_count: int
) -> tuple[dict[str, tuple[str, ...]], frozenset[str], tuple[str, ...]]:
    subs: dict[str, list[str]] = defaultdict(list)
    skip: set[str] = set()
    inserts: list[str] = []
    for t, row in counts.items():
        for o, n in row.items():
            if n < min_count:
                continue
            if t == EPS and o != EPS:
                skip.add(o)
            elif t != EPS and o == EPS:
                inserts.append(t)
            elif t != o:
                subs[o].append(t)
    return (
        {o: tuple(sorted(ts)) for o, ts in subs.items()},
        frozenset(skip),
        tuple(sorted(inserts)),
    )


class PostCorrectorModel:
    def __init__(
        self,
        channel: ChannelModel,
        lm: CharLM,
        config: TrainConfig,
        sub_candidates: dict[str, tuple[str, ...]],
        skip_chars: frozenset[str],
        insert_chars: tuple[str, ...],
    ) -> None:
        self.channel = channel
        self.lm = lm
        self.config = config
        self.sub_candidates = sub_candidates
        self.skip_chars = skip_chars
        self.insert_chars = insert_chars
        # Per-context insertion score vectors, filled lazily during decode.
        # Concurrent refills compute identical values, so a plain dict is safe.
        self._insert_vecs: dict[tuple[int, int], np.ndarray] = {}

    def _insert_vec(self, ctx: tuple[int, int]) -> np.ndarray:
        vec = self._insert_vecs.get(ctx)
        if vec is None:
            lam = self.config.lm_weight
            vec = np.array(
                [
                    self.channel.logp(t, EPS) + lam * self.lm.logp_id(ctx, ord(t))
                    for t in self.insert_chars
                ],
                dtype=np.float64,
            )
            self._insert_vecs[ctx] = vec
        return vec

    def to_doc(self) -> dict[str, Any]:
        lm_counts = {
            f"{c1},{c2}": {str(sym): n for sym, n in row.items()}
            for (c1, c2), row in self.lm.context_counts.items()
        }
        return {
            "format": "noisy-channel-corrector",
            "format_version": 1,
            "alpha": self.config.alpha,
            "alpha_lm": self.config.alpha_lm,
            "min_count": self.config.min_count,
            "beam_width": self.config.beam_width,
            "lm_weight": self.config.lm_weight,
            "alphabet": sorted(self.channel.alphabet),
            "channel_counts": {t: dict(row) for t, row in self.channel.counts.items()},
            "lm_vocab": sorted(self.lm.vocab),
            "lm_counts": lm_counts,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "PostCorrectorModel":
        if doc.get("format") != "noisy-channel-corrector":
            raise PluginInputError("not a corrector model document")
        config = TrainConfig(
            alpha=float(doc["alpha"]),
            alpha_lm=float(doc["alpha_lm"]),
            min_count=int(doc["min_count"]),
            beam_width=int(doc["beam_width"]),
            lm_weight=float(doc["lm_weight"]),
        )
        channel_counts = {
            t: {o: int(n) for o, n in row.items()} for t, row in doc["channel_counts"].items()
        }
        channel = ChannelModel(channel_counts, frozenset(doc["alphabet"]), config.alpha)
        context_counts = {}
        for key, row in doc["lm_counts"].items():
            c1, c2 = key.split(",")
            context_counts[(int(c1), int(c2))] = {int(s): int(n) for s, n in row.items()}
        lm = CharLM(context_counts, frozenset(int(s) for s in doc["lm_vocab"]), config.alpha_lm)
        subs, skip, inserts = _build_inventory(channel_counts, config.min_count)
        return cls(channel, lm, config, subs, skip, inserts)


@dataclass(frozen=True)
class TrainReport:
    pages_used: int
    cer_before: float
    cer_after: float


@dataclass(frozen=True)
class EvalReport:
    cer_before: float
    cer_after: float


def train(
    pairs: list[tuple[str, str]], config: Optional[TrainConfig] = None
) -> tuple[PostCorrectorModel, TrainReport]:
    """Estimate a corrector from (observed page, corrected page) pairs.

    Pages are aligned line-by-line when their line counts match, as whole
    strings otherwise. The report's CER figures are resubstitution (the
    trained model applied back to its own training pages).
    """
    if not pairs:
        raise ValueError("training requires at least one page pair")
    cfg = config or TrainConfig()

    channel_counts: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    alphabet: set[str] = set()
    context_counts: dict[tuple[int, int], dict[int, int]] = defaultdict(lambda: defaultdict(int))
    vocab: set[int] = {EOS_ID}

    for obs_page, true_page in pairs:
        obs_lines = obs_page.split("\n")
        true_lines = true_page.split("\n")
        if len(obs_lines) == len(true_lines):
            units = list(zip(obs_lines, true_lines))
        else:
            units = [(obs_page, true_page)]
        for obs_u, true_u in units:
            alphabet.update(obs_u)
            alphabet.update(true_u)
            for op in align(obs_u, true_u):
                channel_counts[op.true_c][op.obs_c] += 1
        for line in true_lines:
            ids = [ord(c) for c in line]
            vocab.update(ids)
            seq = [BOS_ID, BOS_ID] + ids + [EOS_ID]
            for k in range(2, len(seq)):
                context_counts[(seq[k - 2], seq[k - 1])][seq[k]] += 1

    channel = ChannelModel(
        {t: dict(row) for t, row in channel_counts.items()}, frozenset(alphabet), cfg.alpha
    )
    lm = CharLM(
        {ctx: dict(row) for ctx, row in context_counts.items()}, frozenset(vocab), cfg.alpha_lm
    )
    subs, skip, inserts = _build_inventory(channel.counts, cfg.min_count)
    model = PostCorrectorModel(channel, lm, cfg, subs, skip, inserts)
    scores = evaluate(model, pairs)
    report = TrainReport(
        pages_used=len(pairs), cer_before=scores.cer_before, cer_after=scores.cer_after
    )
    return model, report


# --- beam decoder --------------------------------------------------------------
#
# A state is (last two emitted symbol ids) -> (score, output node); output
# nodes are parent-linked (node, char) pairs materialized only at the end
# or on exact score ties, where the lexicographically smaller output wins.

_State = tuple[float, Optional[tuple]]


def _materialize(node: Optional[tuple]) -> str:
    chars: list[str] = []
    while node is not None:
        node, c = node
        chars.append(c)
    chars.reverse()
    return "".join(chars)


def _merge(states: dict, ctx: tuple[int, int], score: float, node: Optional[tuple]) -> None:
    cur = states.get(ctx)
    if cur is None or score > cur[0]:
        states[ctx] = (score, node)
    elif score == cur[0] and node is not cur[1]:
        if _materialize(node) < _materialize(cur[1]):
            states[ctx] = (score, node)


def _prune(states: dict, beam_width: int) -> dict:
    if len(states) <= beam_width:
        return states
    items = sorted(states.items(), key=lambda kv: (-kv[1][0], kv[0]))
    return dict(items[:beam_width])


def _expand_inserts(model: PostCorrectorModel, states: dict, beam_width: int) -> dict:
    if not model.insert_chars or not states:
        return states
    items = list(states.items())
    vecs = np.stack([model._insert_vec(ctx) for ctx, _ in items])
    base = np.array([sv[0] for _, sv in items], dtype=np.float64)
    totals = base[:, None] + vecs
    order = np.argsort(totals, axis=None)[::-1]
    k = len(model.insert_chars)
    merged = dict(states)
    added: set[tuple[int, int]] = set()
    last_accepted = math.inf
    for flat in order:
        si, ci = divmod(int(flat), k)
        score = float(totals[si, ci])
        if len(added) >= beam_width and score < last_accepted:
            break
        ctx, (_, node) = items[si]
        t = model.insert_chars[ci]
        nctx = (ctx[1], ord(t))
        if nctx in added and score < last_accepted:
            continue
        _merge(merged, nctx, score, (node, t))
        added.add(nctx)
        last_accepted = score
    return _prune(merged, beam_width)


def _consume(model: PostCorrectorModel, states: dict, o: str, beam_width: int) -> dict:
    chan, lm = model.channel, model.lm
    lam = model.config.lm_weight
    oid = ord(o)
    copy_chan = chan.logp(o, o)
    subs = model.sub_candidates.get(o, ())
    skippable = o in model.skip_chars
    skip_chan = chan.logp(EPS, o) if skippable else 0.0
    nxt: dict = {}
    for ctx, (score, node) in states.items():
        s = score + (copy_chan + lam * lm.logp_id(ctx, oid))
        _merge(nxt, (ctx[1], oid), s, (node, o))
        for t in subs:
            tid = ord(t)
            s = score + (chan.logp(t, o) + lam * lm.logp_id(ctx, tid))
            _merge(nxt, (ctx[1], tid), s, (node, t))
        if skippable:
            _merge(nxt, ctx, score + skip_chan, node)
    return _prune(nxt, beam_width)


def decode_scored(model: PostCorrectorModel, obs_line: str) -> tuple[str, float]:
    """Best correction of one line and its objective value."""
    beam_width = model.config.beam_width
    lam = model.config.lm_weight
    states: dict = {(BOS_ID, BOS_ID): (0.0, None)}
    for o in obs_line:
        states = _expand_inserts(model, states, beam_width)
        states = _consume(model, states, o, beam_width)
    states = _expand_inserts(model, states, beam_width)

    best_score = -math.inf
    finals: list[tuple[float, Optional[tuple]]] = []
    for ctx, (score, node) in states.items():
        final = score + lam * model.lm.logp_id(ctx, EOS_ID)
        finals.append((final, node))
        if final > best_score:
            best_score = final
    tied = [node for final, node in finals if final == best_score]
    out = min(_materialize(node) for node in tied)
    return out, best_score


def decode(model: PostCorrectorModel, obs_line: str) -> str:
    return decode_scored(model, obs_line)[0]


def decode_page(
    model: PostCorrectorModel, text: str, probe: Optional[CancelProbe] = None
) -> str:
    out_lines = []
    for line in text.split("\n"):
        if probe is not None and probe():
            raise TaskCancelled()
        out_lines.append(decode(model, line))
    return "\n".join(out_lines)


def cer(hyp: str, ref: str) -> float:
    """Character error rate: edit distance over reference length."""
    if not ref:
        if not hyp:
            return 0.0
        raise ValueError("reference is empty but hypothesis is not")
    return levenshtein(hyp, ref) / len(ref)


def evaluate(model: PostCorrectorModel, pairs: list[tuple[str, str]]) -> EvalReport:
    """Micro-averaged CER before/after correction over page pairs."""
    if not pairs:
        raise ValueError("evaluation requires at least one page pair")
    dist_before = 0
    dist_after = 0
    ref_len = 0
    for obs_page, ref_page in pairs:
        if not ref_page:
            raise ValueError("reference page is empty")
        dist_before += levenshtein(obs_page, ref_page)
        dist_after += levenshtein(decode_page(model, obs_page), ref_page)
        ref_len += len(ref_page)
    return EvalReport(cer_before=dist_before / ref_len, cer_after=dist_after / ref_len)


# --- service/worker integration -------------------------------------------------

PLUGIN_ID = "postcorrect"
PREDICT_TASK = "correct"
TRAIN_TASK = "train"

MANIFEST = PluginManifest(
    plugin_id=PLUGIN_ID,
    version="1.0.0",
    execution=ExecutionMode.IN_PROCESS,
    tasks=(
        TaskSpec(
            task_name=PREDICT_TASK,
            kind=TaskKind.PREDICT,
            input_kind=InputKind.TEXT_LINES,
            output_kind=OutputKind.TEXT_LINES,
            queue_class="cpu-light",
            supports_finetune=True,
            languages=("*",),
        ),
        TaskSpec(
            task_name=TRAIN_TASK,
            kind=TaskKind.TRAIN,
            input_kind=InputKind.TEXT_PAIRS,
            output_kind=OutputKind.MODEL_ARTIFACT,
            queue_class="cpu-heavy",
            supports_finetune=False,
            languages=("*",),
        ),
    ),
)


def parse_text_pairs(text: str) -> list[tuple[str, str]]:
    """Parse one JSON object per line: {"source": ..., "target": ...}.

    Raises PluginInputError naming the first malformed line (1-based).
    """
    pairs: list[tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise PluginInputError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(doc, dict) or "source" not in doc or "target" not in doc:
            raise PluginInputError(f"line {lineno}: expected source and target fields")
        src, tgt = doc["source"], doc["target"]
        if not isinstance(src, str) or not isinstance(tgt, str):
            raise PluginInputError(f"line {lineno}: source and target must be strings")
        pairs.append((src, tgt))
    if not pairs:
        raise PluginInputError("dataset contains no records")
    return pairs


def run_predict(
    artifact_doc: Optional[dict],
    text: str,
    params: dict[str, Any],
    log: LogFn,
    should_cancel: CancelProbe,
) -> str:
    if artifact_doc is None:
        log("no trained model attached; passing text through unchanged\n")
        return text
    model = PostCorrectorModel.from_doc(artifact_doc)
    n_lines = text.count("\n") + 1
    log(f"correcting {n_lines} line(s)\n")
    out = decode_page(model, text, probe=should_cancel)
    log("done\n")
    return out


def run_train(
    pairs_jsonl: str,
    params: dict[str, Any],
    log: LogFn,
    should_cancel: CancelProbe,
) -> dict[str, Any]:
    cfg = TrainConfig.from_params(params)
    pairs = parse_text_pairs(pairs_jsonl)
    log(f"training on {len(pairs)} corrected page(s)\n")
    if should_cancel():
        raise TaskCancelled()
    model, report = train(pairs, cfg)
    if should_cancel():
        raise TaskCancelled()
    log(
        f"resubstitution CER {report.cer_before:.4f} -> {report.cer_after:.4f} "
        f"on {report.pages_used} page(s)\n"
    )
    doc = model.to_doc()
    doc["report"] = {
        "pages_used": report.pages_used,
        "cer_before": report.cer_before,
        "cer_after": report.cer_after,
    }
    return doc


def execute(
    task_name: str,
    artifact_doc: Optional[dict],
    input_bytes: bytes,
    params: dict[str, Any],
    log: LogFn,
    should_cancel: CancelProbe,
) -> bytes:
    try:
        text = input_bytes.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise PluginInputError(f"input is not valid UTF-8: {exc}") from exc
    if task_name == PREDICT_TASK:
        return run_predict(artifact_doc, text, params, log, should_cancel).encode("utf-8")
    if task_name == TRAIN_TASK:
        doc = run_train(text, params, log, should_cancel)
        return json.dumps(doc).encode("utf-8")
    raise PluginInputError(f"unknown task {task_name!r}")
