"""Dataset splits, the training loop, evaluation, and checkpoint state.

One epoch:

1. the pool is the base training pairs, plus rebalancing pairs for keywords
   whose text-head error last epoch was above the median, plus
   edit-synthesized hard negatives built from a share of the positives;
2. the pool is shuffled and walked in minibatches; each step runs every
   encoder once, sums the enabled losses, and takes a momentum SGD step;
3. after each step the memory bank absorbs the pooled query phonemes of
   every pair the text head got right with enough margin;
4. the validation split is scored in all three enrollment modes.

All randomness comes from streams keyed by (seed, epoch, purpose), so a run
resumed from a checkpoint retraces the uninterrupted one exactly.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .augmentation import draw_n_edits, make_hard_negative, rebalance_pairs
from .config import CorpusConfig, RunConfig
from .corpus import (
    EASY,
    HARD,
    POSITIVE,
    PairExample,
    PhonemeInventory,
    SynthParams,
    build_pairs,
    generate_inventory,
    generate_vocab,
)
from .errors import AugmentationError, CompatibilityError, ContractError, FormatError, NumericalError
from .memory_bank import MemoryBank
from .metrics import ScoredSet, merge_reports, report
from .numerics import no_grad
from .rng import make_rng
from .verifier import Batch, LossBundle, LossToggles, ModelConfig, PLCLModel, compute_losses

SPLITS = ("train", "val", "test")
MODES = ("text", "audio", "both")


# -- corpus splits ---------------------------------------------------------------
@dataclass
class Splits:
    inventory: PhonemeInventory
    pairs: dict
    vocab: dict
    meta: dict


def split_sizes(total: int, ratios: Sequence[float]) -> list[int]:
    """Rounded sizes for val and test; train absorbs the remainder."""
    val = round(total * ratios[1])
    test = round(total * ratios[2])
    return [total - val - test, val, test]


def class_counts(n: int, mix: Sequence[float]) -> dict:
    pos = round(n * mix[0])
    easy = round(n * mix[1])
    return {POSITIVE: pos, EASY: easy, HARD: n - pos - easy}


def generate_splits(cc: CorpusConfig) -> Splits:
    cc.validate()
    inv = generate_inventory(cc.K, cc.d_in, cc.separation, seed=make_rng(cc.seed, "inventory"))
    families = generate_vocab(cc.n_keywords, cc.K, cc.min_len, cc.max_len, cc.family_size, seed=make_rng(cc.seed, "vocab"))
    if cc.open_vocab:
        order = make_rng(cc.seed, "family-split").permutation(len(families))
        fam = [families[i] for i in order]
        n_val = max(1, round(len(fam) * cc.split_ratios[1]))
        n_test = max(1, round(len(fam) * cc.split_ratios[2]))
        groups = {"val": fam[:n_val], "test": fam[n_val : n_val + n_test], "train": fam[n_val + n_test :]}
        if not groups["train"]:
            raise ContractError("open-vocab split left no families for training")
        vocab = {s: [w for f in groups[s] for w in f] for s in SPLITS}
    else:
        flat = [w for f in families for w in f]
        vocab = {s: flat for s in SPLITS}
    synth = SynthParams(cc.dur_min, cc.dur_max, cc.noise_sigma, cc.speaker_sigma)
    pairs = {}
    for split, n in zip(SPLITS, split_sizes(cc.n_pairs, cc.split_ratios)):
        counts = class_counts(n, cc.class_mix)
        pairs[split] = build_pairs(
            vocab[split], inv, counts, cc.hard_threshold, make_rng(cc.seed, "pairs", split), synth, cc.max_reuse
        )
    meta = {"seed": cc.seed, "open_vocab": cc.open_vocab, "hard_threshold": cc.hard_threshold}
    return Splits(inv, pairs, vocab, meta)


# -- optimisation -------------------------------------------------------------------
def sgd_momentum_step(
    params: dict, velocity: dict, lr: float, momentum: float, clip: float, weight_decay: float = 0.0
) -> float:
    """``v <- momentum * v + g``; ``p <- p - lr * v``, after scaling the global
    gradient norm down to ``clip`` (0 disables clipping). Returns the
    pre-clip norm."""
    names = sorted(params)
    sq = 0.0
    for n in names:
        g = params[n].grad
        if g is not None:
            sq += float(np.sum(g * g))
    norm = math.sqrt(sq)
    scale = clip / norm if clip > 0 and norm > clip else 1.0
    for n in names:
        p = params[n]
        if p.grad is None:
            continue
        v = velocity.get(n)
        g = p.grad * scale
        if weight_decay:
            g = g + weight_decay * p.data
        v = g if v is None else momentum * v + g
        velocity[n] = v
        p.data = p.data - lr * v
        p.grad = None
    return norm


# -- state ----------------------------------------------------------------------------
@dataclass
class TrainState:
    cfg: RunConfig
    model: PLCLModel
    bank: MemoryBank | None
    velocity: dict = field(default_factory=dict)
    epoch: int = 0
    keyword_errors: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    thresholds: dict = field(default_factory=dict)
    inventory_checksum: str | None = None

    @classmethod
    def fresh(cls, cfg: RunConfig, inventory_checksum: str | None = None) -> "TrainState":
        model = PLCLModel(_model_cfg(cfg))
        bank = MemoryBank.empty(cfg.model.K, cfg.model.d_proj, cfg.train.alpha) if cfg.train.memory_bank else None
        return cls(cfg, model, bank, inventory_checksum=inventory_checksum)

    # -- persistence ---------------------------------------------------------
    def to_checkpoint(self) -> ckpt.CheckpointData:
        header = {
            "kind": "plcl-model",
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "history": self.history,
            "thresholds": self.thresholds,
            "keyword_errors": [[list(k), v] for k, v in sorted(self.keyword_errors.items())],
            "inventory_checksum": self.inventory_checksum,
            "bank": None,
        }
        blocks = {f"param/{n}": t.data for n, t in self.model.params.items()}
        blocks.update({f"velocity/{n}": v for n, v in self.velocity.items()})
        if self.bank is not None:
            snap = self.bank.snapshot()
            header["bank"] = {"version": snap["version"], "alpha": snap["alpha"]}
            blocks["bank/entries"] = snap["entries"]
            blocks["bank/initialized"] = snap["initialized"].astype(np.float64)
            blocks["bank/update_count"] = snap["update_count"].astype(np.float64)
        return ckpt.CheckpointData(header, blocks)

    @classmethod
    def from_checkpoint(cls, data: ckpt.CheckpointData) -> "TrainState":
        h = data.header
        if h.get("kind") != "plcl-model":
            raise FormatError("checkpoint does not hold a model")
        cfg = RunConfig.from_dict(h["config"])
        model = PLCLModel(_model_cfg(cfg))
        for n, t in model.params.items():
            key = f"param/{n}"
            if key not in data.blocks:
                raise FormatError(f"checkpoint is missing parameter {n}")
            if data.blocks[key].shape != t.shape:
                raise FormatError(f"parameter {n}: shape {data.blocks[key].shape} != {t.shape}")
            t.data = data.blocks[key].copy()
        velocity = {k[len("velocity/") :]: v.copy() for k, v in data.blocks.items() if k.startswith("velocity/")}
        bank = None
        if h.get("bank"):
            bank = MemoryBank.restore(
                {
                    "version": h["bank"]["version"],
                    "alpha": h["bank"]["alpha"],
                    "entries": data.blocks["bank/entries"],
                    "initialized": data.blocks["bank/initialized"].astype(bool),
                    "update_count": data.blocks["bank/update_count"].astype(np.int64),
                }
            )
        errors = {tuple(k): v for k, v in h.get("keyword_errors", [])}
        return cls(cfg, model, bank, velocity, h["epoch"], errors, h.get("history", []), h.get("thresholds", {}), h.get("inventory_checksum"))

    def save(self, path) -> None:
        ckpt.save(self.to_checkpoint(), path)

    @classmethod
    def load(cls, path) -> "TrainState":
        return cls.from_checkpoint(ckpt.load(path))


def _model_cfg(cfg: RunConfig) -> ModelConfig:
    m = cfg.model
    if not cfg.train.memory_bank and m.inject_count:
        m = replace(m, inject_count=0)
    return m


# -- evaluation ---------------------------------------------------------------------------
@dataclass
class ScoredPairs:
    scores: dict
    labels: np.ndarray
    difficulty: tuple

    def scored_set(self, mode: str) -> ScoredSet:
        return ScoredSet(self.scores[mode], self.labels, self.difficulty)


def eval_seed(seed: int):
    """Injection stream for evaluation example ``i``: depends only on the
    example's position, never on batching."""
    return lambda offset: (lambda i: make_rng(seed, "inject-eval", offset + i))


def score_pairs(
    model: PLCLModel, bank: MemoryBank | None, pairs: Sequence[PairExample], seed: int, batch_size: int = 64, modes=MODES
) -> ScoredPairs:
    """Score every pair in every requested mode. Text and audio scores come
    from the same forward pass as the fused score."""
    use_text = "text" in modes or "both" in modes
    use_audio = "audio" in modes or "both" in modes
    scores = {m: [] for m in modes}
    seeds = eval_seed(seed)
    with no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            out = model.forward(Batch.from_pairs(chunk, use_text, use_audio, alignment=False), bank, seeds(start))
            for m in modes:
                scores[m].append(out.scores(m))
    labels = np.array([p.label for p in pairs], dtype=np.int64)
    diff = tuple(p.difficulty for p in pairs)
    return ScoredPairs({m: np.concatenate(v) for m, v in scores.items()}, labels, diff)


def evaluate(model, bank, pairs, seed: int, batch_size: int = 64, modes=MODES):
    sp = score_pairs(model, bank, pairs, seed, batch_size, modes)
    return merge_reports([report(sp.scored_set(m), prefix=f"{m}/") for m in modes]), sp


# -- training ---------------------------------------------------------------------------------
LOG_FIELDS = ("l_uat", "l_uat3", "l_clat", "l_uaa", "l_claa", "l_uata", "l_at", "l_aa", "total")


def check_bundle(b: LossBundle, where: str) -> dict:
    vals = b.as_floats()
    for name in LossBundle.COMPONENTS + ("total",):
        if not math.isfinite(vals[name]):
            raise NumericalError(f"{where}: loss component {name} is {vals[name]}")
    if abs(vals["l_at"] - (vals["l_uat"] + vals["l_uat3"] + vals["l_clat"])) > 1e-9:
        raise NumericalError(f"{where}: l_at does not equal its components")
    if abs(vals["l_aa"] - (vals["l_uaa"] + vals["l_claa"])) > 1e-9:
        raise NumericalError(f"{where}: l_aa does not equal its components")
    if abs(vals["total"] - (vals["l_at"] + vals["l_aa"] + vals["l_uata"])) > 1e-9:
        raise NumericalError(f"{where}: total does not equal its components")
    return vals


def toggles_of(cfg: RunConfig) -> LossToggles:
    t = cfg.train
    return LossToggles(clat=t.clat, claa=t.claa, uat3=t.uat3, uat=t.uat, uaa=t.uaa, uata=t.uata)


def augment_epoch(state: TrainState, base: Sequence[PairExample], inventory, epoch: int, vocabulary) -> list:
    """Edit-synthesized hard negatives for this epoch (none until the bank can
    supply replacement phonemes)."""
    t = state.cfg.train
    bank = state.bank
    if bank is None or t.augment_ratio == 0 or len(bank.eligible()) < 2:
        return []
    positives = [p for p in base if p.match_label == POSITIVE]
    if not positives:
        return []
    n = round(t.augment_ratio * len(positives))
    rng = make_rng(t.seed, "augment", epoch)
    reps = -(-n // len(positives))
    pick = np.concatenate([rng.permutation(len(positives)) for _ in range(reps)])[:n] if n else []
    cc = state.cfg.corpus
    synth = SynthParams(cc.dur_min, cc.dur_max, cc.noise_sigma, cc.speaker_sigma)
    out = []
    for j, i in enumerate(pick):
        r = make_rng(t.seed, "augment", epoch, j)
        try:
            out.append(make_hard_negative(positives[i], draw_n_edits(r, t.p_single_edit), bank, r, inventory, synth, vocabulary))
        except AugmentationError:
            continue
    return out


def train(
    state: TrainState,
    train_pairs: Sequence[PairExample],
    val_pairs: Sequence[PairExample],
    inventory: PhonemeInventory,
    epochs: int | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainState:
    """Run ``epochs`` more epochs (default: up to ``cfg.train.epochs``)."""
    cfg = state.cfg
    t = cfg.train
    if state.inventory_checksum is None:
        state.inventory_checksum = inventory.checksum()
    elif state.inventory_checksum != inventory.checksum():
        raise CompatibilityError("training data inventory does not match the checkpoint")
    end = t.epochs if epochs is None else state.epoch + epochs
    toggles = toggles_of(cfg)
    vocabulary = sorted({p.keyword for p in train_pairs} | {p.enroll_keyword for p in train_pairs})
    model, bank = state.model, state.bank
    while state.epoch < end:
        epoch = state.epoch
        pool = list(train_pairs)
        extra = []
        if t.rebalance and state.keyword_errors:
            extra = rebalance_pairs(train_pairs, state.keyword_errors, t.boost_factor, make_rng(t.seed, "rebalance", epoch))[len(train_pairs) :]
        aug = augment_epoch(state, train_pairs, inventory, epoch, vocabulary)
        pool += extra + aug
        order = make_rng(t.seed, "shuffle", epoch).permutation(len(pool))
        pool = [pool[i] for i in order]
        sums = defaultdict(float)
        n_steps = 0
        kw_wrong = defaultdict(int)
        kw_total = defaultdict(int)
        for step, start in enumerate(range(0, len(pool), t.batch_size)):
            chunk = pool[start : start + t.batch_size]
            batch = Batch.from_pairs(chunk)
            seed_for = lambda i, _s=step: make_rng(t.seed, "inject", epoch, _s, i)
            out = model.forward(batch, bank, seed_for)
            bundle = compute_losses(model, batch, out, toggles)
            vals = check_bundle(bundle, f"epoch {epoch + 1} step {step + 1}")
            bundle.total.backward()
            sgd_momentum_step(model.params, state.velocity, t.lr, t.momentum, t.grad_clip, t.weight_decay)
            for k in LOG_FIELDS:
                sums[k] += vals[k]
            n_steps += 1
            text_scores = out.text.score.data
            for b, p in enumerate(chunk):
                kw_total[p.keyword] += 1
                if (text_scores[b] >= 0.5) != (p.label == 1):
                    kw_wrong[p.keyword] += 1
            if bank is not None:
                margin = np.where(batch.labels == 1, text_scores - 0.5, 0.5 - text_scores)
                pooled = out.q_pooled.data
                for b, p in enumerate(chunk):
                    if margin[b] < t.bank_margin:
                        continue
                    for ti, pid in enumerate(p.query.phonemes):
                        bank.update(pid, pooled[b, ti], quality=float(margin[b]), quality_threshold=t.bank_margin)
        state.keyword_errors = {k: kw_wrong[k] / kw_total[k] for k in sorted(kw_total)}
        rep, _ = evaluate(model, bank, val_pairs, t.seed, t.eval_batch_size)
        state.thresholds = {m: rep.get(f"{m}/all").threshold for m in MODES}
        entry = {"epoch": epoch + 1, "n_pairs": len(pool), "n_augmented": len(aug), "n_rebalanced": len(extra)}
        entry.update({k: sums[k] / max(n_steps, 1) for k in LOG_FIELDS})
        entry["bank_filled"] = 0 if bank is None else int(bank.initialized.sum())
        for m in MODES:
            r = rep.get(f"{m}/all")
            entry[f"val_{m}_auc"] = r.auc
            entry[f"val_{m}_eer"] = r.eer
        state.history.append(entry)
        state.epoch += 1
        if log is not None:
            log(format_log(entry))
    return state


def format_log(entry: dict) -> str:
    parts = [f"epoch={entry['epoch']}"]
    parts += [f"{k}={entry[k]:.6f}" for k in LOG_FIELDS]
    parts += [f"pairs={entry['n_pairs']}", f"aug={entry['n_augmented']}", f"rebal={entry['n_rebalanced']}", f"bank={entry['bank_filled']}"]
    for m in MODES:
        parts.append(f"val_{m}_auc={entry[f'val_{m}_auc']:.6f}")
        parts.append(f"val_{m}_eer={entry[f'val_{m}_eer']:.6f}")
    return " ".join(parts)
