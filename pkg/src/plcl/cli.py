"""Command-line entry points.

Verbs: ``gen``, ``train``, ``eval``, ``enroll``, ``query``, ``dump-attn`` and
``selftest``. Exit codes: 0 success, 2 usage, 3 data/format, 4 numerical
abort (1 when the self-test reports a failure).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import RunConfig, load_config, write_echo
from .corpus import decode_array, encode_array, load_dataset_full, load_utterance, save_dataset
from .errors import CompatibilityError, FormatError, ParseError, PLCLError, UsageError
from .metrics import merge_reports
from .numerics import Tensor, no_grad
from .rng import make_rng
from .training import MODES, SPLITS, TrainState, class_counts, evaluate, format_log, generate_splits, split_sizes, train
from .verifier import Batch, resolve_mode

STORE_VERSION = 1


# -- helpers -------------------------------------------------------------------
def parse_overrides(items) -> dict:
    """``["train.lr=0.02", ...]`` -> ``{"train.lr": 0.02}`` with YAML typing."""
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            out[key.strip()] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise UsageError(f"--set {key}: cannot parse value {raw!r}: {exc}") from None
    return out


def resolve_config(path, overrides) -> RunConfig:
    cfg = load_config(path) if path else RunConfig().validate()
    return cfg.with_overrides(parse_overrides(overrides)) if overrides else cfg


def load_split(data, split: str):
    path = Path(data)
    if path.is_dir():
        path = path / f"{split}.jsonl"
    if not path.exists():
        raise UsageError(f"dataset file {path} does not exist")
    return load_dataset_full(path)


def check_inventory(state: TrainState, ds, what: str) -> None:
    if ds.inventory_checksum is None:
        raise CompatibilityError(f"{what} carries no inventory checksum")
    if state.inventory_checksum != ds.inventory_checksum:
        raise CompatibilityError(
            f"{what} inventory {ds.inventory_checksum} does not match the checkpoint's {state.inventory_checksum}"
        )


def render_log(history) -> str:
    return "".join(format_log(e) + "\n" for e in history)


def parse_phonemes(text: str, k: int) -> tuple:
    try:
        ids = tuple(int(tok) for tok in text.replace(",", " ").split())
    except ValueError:
        raise UsageError(f"--text expects phoneme ids separated by spaces or commas, got {text!r}") from None
    if not ids:
        raise UsageError("--text is empty")
    bad = [i for i in ids if not 0 <= i < k]
    if bad:
        raise UsageError(f"phoneme ids {bad} lie outside [0, {k})")
    return ids


def write_grid(path, name: str, grid: np.ndarray) -> None:
    """One header line, then one row per line with round-trippable floats."""
    grid = np.asarray(grid, dtype=np.float64)
    lines = [f"# {name} rows={grid.shape[0]} cols={grid.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_grid(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ParseError(f"{path}: missing grid header")
    fields = dict(tok.split("=", 1) for tok in lines[0][2:].split()[1:])
    rows, cols = int(fields["rows"]), int(fields["cols"])
    grid = np.array([[float(v) for v in line.split()] for line in lines[1:]], dtype=np.float64).reshape(rows, cols)
    return grid


# -- verbs ------------------------------------------------------------------------
def cmd_gen(args) -> int:
    cfg = resolve_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = generate_splits(cfg.corpus)
    for split in SPLITS:
        save_dataset(splits.pairs[split], out / f"{split}.jsonl", splits.inventory, dict(splits.meta, split=split))
    write_echo(cfg, out / "config.yaml")
    sizes = split_sizes(cfg.corpus.n_pairs, cfg.corpus.split_ratios)
    for split, n in zip(SPLITS, sizes):
        counts = class_counts(n, cfg.corpus.class_mix)
        shown = " ".join(f"{k}={v}" for k, v in counts.items())
        print(f"{split}: {len(splits.pairs[split])} pairs ({shown}) keywords={len(splits.vocab[split])}")
    return 0


def cmd_train(args) -> int:
    train_ds = load_split(args.data, "train")
    val_ds = load_split(args.data, "val")
    if args.resume:
        if args.config or args.set:
            raise UsageError("--resume takes its configuration from the checkpoint")
        state = TrainState.load(args.resume)
        check_inventory(state, train_ds, "training data")
        if args.epochs is not None:
            state.cfg = state.cfg.with_overrides({"train.epochs": args.epochs})
    else:
        config = args.config
        if config is None and Path(args.data).is_dir() and (Path(args.data) / "config.yaml").exists():
            config = Path(args.data) / "config.yaml"
        cfg = resolve_config(config, args.set)
        if args.epochs is not None:
            cfg = cfg.with_overrides({"train.epochs": args.epochs})
        if train_ds.inventory is None:
            raise CompatibilityError("training data carries no phoneme inventory")
        state = TrainState.fresh(cfg, train_ds.inventory_checksum)
    if state.epoch >= state.cfg.train.epochs:
        raise UsageError(f"checkpoint is already at epoch {state.epoch} of {state.cfg.train.epochs}")
    echo = None if args.quiet else (lambda line: print(line, flush=True))
    train(state, train_ds.pairs, val_ds.pairs, train_ds.inventory, log=echo)
    out = Path(args.out)
    state.save(out)
    Path(str(out) + ".log").write_text(render_log(state.history), encoding="utf-8")
    write_echo(state.cfg, str(out) + ".config.yaml")
    return 0


def cmd_eval(args) -> int:
    state = TrainState.load(args.checkpoint)
    ds = load_split(args.data, "test")
    check_inventory(state, ds, "evaluation data")
    modes = MODES if args.mode == "all" else (args.mode,)
    reports = []
    for mode in modes:
        rep, _ = evaluate(state.model, state.bank, ds.pairs, state.cfg.train.seed, state.cfg.train.eval_batch_size, (mode,))
        reports.append(rep)
    text = merge_reports(reports).to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _load_store(path) -> dict:
    p = Path(path)
    if not p.exists():
        return {"version": STORE_VERSION, "inventory_checksum": None, "entries": {}}
    try:
        store = json.loads(p.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: not an enrollment store: {exc}") from None
    if store.get("version") != STORE_VERSION:
        raise FormatError(f"{path}: unsupported enrollment store version {store.get('version')}")
    return store


def _pack(t) -> dict:
    a = t.data[0]
    return {"shape": list(a.shape), "values": encode_array(a)}


def _unpack(d) -> np.ndarray:
    return decode_array(d["values"], d["shape"])[None]


def cmd_enroll(args) -> int:
    if args.text is None and args.audio is None:
        raise UsageError("enroll needs --text, --audio, or both")
    state = TrainState.load(args.checkpoint)
    model = state.model
    store = _load_store(args.store)
    if store["inventory_checksum"] not in (None, state.inventory_checksum):
        raise CompatibilityError("enrollment store was built with a different checkpoint inventory")
    entry = {"text": None, "t_proj": None, "a_proj": None}
    with no_grad():
        if args.text is not None:
            ids = parse_phonemes(args.text, model.cfg.K)
            entry["text"] = list(ids)
            entry["t_proj"] = _pack(model.encode_text(np.array([ids]), np.ones((1, len(ids)))))
        if args.audio is not None:
            u = load_utterance(args.audio)
            entry["a_proj"] = _pack(model.encode_enroll_audio(u.frames[None], np.ones((1, u.n_frames))))
    store["inventory_checksum"] = state.inventory_checksum
    store["entries"][args.name] = entry
    Path(args.store).write_text(json.dumps(store, sort_keys=True) + "\n", encoding="utf-8")
    mode = resolve_mode(entry["t_proj"] is not None, entry["a_proj"] is not None)
    print(f"enrolled {args.name!r} ({mode})")
    return 0


def cmd_query(args) -> int:
    state = TrainState.load(args.checkpoint)
    model = state.model
    store = _load_store(args.store)
    if not store["entries"]:
        raise UsageError(f"enrollment store {args.store} is empty")
    if store["inventory_checksum"] != state.inventory_checksum:
        raise CompatibilityError("enrollment store was built with a different checkpoint inventory")
    names = [args.name] if args.name else sorted(store["entries"])
    missing = [n for n in names if n not in store["entries"]]
    if missing:
        raise UsageError(f"no enrollment named {missing[0]!r}")
    u = load_utterance(args.audio)
    q_mask = np.ones((1, u.n_frames))
    with no_grad():
        q_proj = model.encode_query(u.frames[None], q_mask)
        for i, name in enumerate(names):
            e = store["entries"][name]
            t_proj = a_proj = t_mask = a_mask = exclude = None
            if e["t_proj"] is not None:
                t_proj = _unpack(e["t_proj"])
                t_mask = np.ones(t_proj.shape[:2])
                exclude = [tuple(e["text"])]
            if e["a_proj"] is not None:
                a_proj = _unpack(e["a_proj"])
                a_mask = np.ones(a_proj.shape[:2])
            mode = resolve_mode(t_proj is not None, a_proj is not None)
            seed_for = lambda j, _i=i: make_rng(state.cfg.train.seed, "inject-query", _i, j)
            out = model.score_projections(
                q_proj,
                q_mask,
                None if t_proj is None else Tensor(t_proj),
                t_mask,
                None if a_proj is None else Tensor(a_proj),
                a_mask,
                state.bank,
                seed_for,
                exclude,
            )
            score = float(out.scores(mode)[0])
            threshold = float(state.thresholds.get(mode, 0.5))
            route = {"text": "text head", "audio": "audio head", "both": "fusion"}[mode]
            print(f"route {name}: {mode} ({route})", file=sys.stderr)
            decision = "accept" if score >= threshold else "reject"
            print(f"{name} score={score!r} threshold={threshold!r} {decision}")
    return 0


def cmd_dump_attn(args) -> int:
    state = TrainState.load(args.checkpoint)
    ds = load_split(args.data, "test")
    check_inventory(state, ds, "dump data")
    if not 0 <= args.index < len(ds.pairs):
        raise UsageError(f"--index must lie in [0, {len(ds.pairs)})")
    pair = ds.pairs[args.index]
    use_text = pair.enroll_text is not None
    use_audio = pair.enroll_audio is not None
    seed = state.cfg.train.seed
    with no_grad():
        out = state.model.forward(
            Batch.from_pairs([pair], use_text, use_audio, alignment=False),
            state.bank,
            lambda i: make_rng(seed, "inject-eval", args.index + i),
        )
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    if out.m_at is not None:
        rows = out.m_at_rows[0].astype(bool)
        write_grid(dest / "m_at.txt", "m_at", out.m_at.data[0][rows])
        write_grid(dest / "text_attention.txt", "text_attention", out.text.weights.data[0][np.ix_(rows, rows)])
        written += ["m_at", "text_attention"]
    if out.m_aa is not None:
        write_grid(dest / "m_aa.txt", "m_aa", out.m_aa.data[0])
        write_grid(dest / "audio_attention.txt", "audio_attention", out.audio.weights.data[0])
        written += ["m_aa", "audio_attention"]
    meta = {
        "index": args.index,
        "label": pair.label,
        "difficulty": pair.difficulty,
        "query_phonemes": list(pair.query.phonemes),
        "enroll_text": None if pair.enroll_text is None else list(pair.enroll_text),
        "injected_ids": [list(x) for x in out.injected_ids][:1],
        "files": written,
    }
    (dest / "pair.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    print(" ".join(f"{n}.txt" for n in written))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run

    return 0 if run() else 1


# -- parser -------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plcl", description="Phoneme-level contrastive keyword verification.")
    sub = ap.add_subparsers(dest="verb", required=True)

    def overrides(p):
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.lr=0.02")

    p = sub.add_parser("gen", help="generate train/val/test splits")
    p.add_argument("--config", help="YAML config (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    overrides(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model (or resume one)")
    p.add_argument("--config", help="YAML config (defaults to DATA/config.yaml)")
    p.add_argument("--data", required=True, help="directory written by gen")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, help="total number of epochs to reach")
    p.add_argument("--quiet", action="store_true", help="do not echo per-epoch log lines")
    overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a split and write a metrics CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file, or a gen directory (uses test.jsonl)")
    p.add_argument("--mode", choices=MODES + ("all",), default="all")
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("enroll", help="store a keyword enrollment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True, help="enrollment store (JSON, created if absent)")
    p.add_argument("--name", required=True)
    p.add_argument("--text", help="phoneme ids, e.g. '3 17 5'")
    p.add_argument("--audio", help="utterance file")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("query", help="score a query utterance against stored enrollments")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--audio", required=True, help="query utterance file")
    p.add_argument("--name", help="enrollment to test (all when omitted)")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("dump-attn", help="write similarity and attention grids for one pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_dump_attn)

    p = sub.add_parser("selftest", help="run the bundled oracle checks")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PLCLError as exc:
        print(f"plcl {args.verb}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"plcl {args.verb}: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
