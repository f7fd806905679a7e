"""Command-line entry point: ``nezha <subcommand> [flags]``.

Every subcommand reads an optional YAML config (``--config``), applies flag
overrides (``--set section.key=value`` plus a few dedicated flags), writes the
resolved config into its run directory and then does its work there.
Run directories live under ``$NEZHA_RUN_DIR`` (default ``./runs``) and are
named ``<subcommand>-<timestamp>-<config hash>`` unless ``--run-dir`` is given.

Exit codes: 0 success, 2 configuration error, 3 missing input path.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import yaml
from threadpoolctl import threadpool_limits

from .backbone import BackboneConfig
from .codec import VocabularySet
from .data import (DataSpecError, InteractionLog, ItemCatalog, SyntheticSpec, generate,
                   load_semantic_ids, save_semantic_ids, split)
from .decoding import DecodeRequest
from .evaluation import Decoder, benchmark, evaluate
from .head import HeadConfig
from .model import RecModel
from .params import CheckpointError
from .tokenizer import ResidualQuantizer
from .training import TrainConfig, Trainer

log = logging.getLogger("nezha")

EXIT_CONFIG = 2
EXIT_MISSING = 3

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "radices": [64, 64, 64],
    "data": {
        "n_users": 5000, "n_items": 2000, "d_emb": 32, "mode": "chained", "noise": 0.1,
        "branching": 6, "mixture_concentration": 20.0, "min_len": 4, "max_len": 12,
        "query_len": 0, "emb_noise": 0.01,
    },
    "tokenizer": {"max_iter": 20},
    "backbone": {"d_hid": 64, "n_layers": 2, "n_heads": 2, "max_seq_len": 64,
                 "query_vocab": 64, "init_std": 0.02, "dtype": "float64"},
    "head": {"variant": "nezha", "combine": "sum", "share_transition": False,
             "tie_embeddings": False},
    "train": {"epochs": 10, "lr": 2e-3, "batch_size": 64, "clip_norm": 1.0,
              "head_weight": 1.0, "lm_weight": 1.0, "freeze_backbone": False},
    "decode": {"decoder": "nezha", "K": 10, "verify": True, "pad_policy": "strict",
               "split": "test", "limit": 0},
    "bench": {"K": 512, "repetitions": 5, "requests": 20,
              "decoders": ["beam", "nezha"]},
    "ablate": {"variants": ["nezha", "nezha-1", "nezha-2", "nezha-3", "nezha-4"]},
    "paths": {"catalog": None, "log": None, "ids": None, "vocab": None,
              "checkpoint": None, "draft": None, "input": None},
}


class ConfigError(ValueError):
    pass


class MissingPathError(FileNotFoundError):
    pass


# ----------------------------------------------------------------------
# config


def _merge(base: dict, over: dict, where: str = "") -> dict:
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where + k!r} must be a mapping")
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v
    return base


def _set(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.subcommand == "bench":
        cfg["decode"]["K"] = cfg["bench"]["K"]
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingPathError(str(path))
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, loaded)
    for item in args.set or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        _set(cfg, key.strip(), yaml.safe_load(raw))
    direct = {
        "seed": ("seed",), "threads": ("threads",), "radices": ("radices",),
        "k": ("decode", "K"), "decoder": ("decode", "decoder"), "variant": ("head", "variant"),
        "epochs": ("train", "epochs"), "limit": ("decode", "limit"), "split": ("decode", "split"),
        "repetitions": ("bench", "repetitions"), "requests": ("bench", "requests"),
        "n_users": ("data", "n_users"), "n_items": ("data", "n_items"), "mode": ("data", "mode"),
        "catalog": ("paths", "catalog"), "log": ("paths", "log"), "ids": ("paths", "ids"),
        "vocab": ("paths", "vocab"), "checkpoint": ("paths", "checkpoint"),
        "draft": ("paths", "draft"), "input": ("paths", "input"),
    }
    for flag, keys in direct.items():
        value = getattr(args, flag, None)
        if value is not None:
            _set(cfg, ".".join(keys), value)
    if getattr(args, "no_verify", False):
        cfg["decode"]["verify"] = False
    _check(cfg)
    return cfg


def _check(cfg: dict) -> None:
    r = cfg["radices"]
    if not isinstance(r, list) or not r or not all(isinstance(t, int) and t >= 1 for t in r):
        raise ConfigError(f"radices must be a list of positive integers, got {r!r}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("threads must be a positive integer")
    if cfg["decode"]["decoder"] not in ("beam", "sd", "nezha"):
        raise ConfigError(f"decoder must be beam, sd or nezha, got {cfg['decode']['decoder']!r}")
    if not isinstance(cfg["decode"]["K"], int) or cfg["decode"]["K"] < 1:
        raise ConfigError("decode.K must be a positive integer")
    if cfg["decode"]["split"] not in ("test", "valid"):
        raise ConfigError("decode.split must be 'test' or 'valid'")
    try:
        HeadConfig(**cfg["head"])
        BackboneConfig(radices=tuple(r), seed=cfg["seed"], **cfg["backbone"])
        TrainConfig(seed=cfg["seed"], **cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:10]


def make_run_dir(args, cfg: dict) -> Path:
    if args.run_dir:
        out = Path(args.run_dir)
    else:
        root = Path(os.environ.get("NEZHA_RUN_DIR", "runs"))
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = root / f"{args.subcommand}-{stamp}-{config_hash(cfg)}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")
    return out


# ----------------------------------------------------------------------
# artifact helpers


def _need(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing required path: paths.{what}")
    p = Path(path)
    if not p.exists():
        raise MissingPathError(str(p))
    return p


def _synthetic_spec(cfg: dict) -> SyntheticSpec:
    return SyntheticSpec(radices=tuple(cfg["radices"]), seed=cfg["seed"],
                         beam_size=min(cfg["decode"]["K"], 10),
                         query_vocab=cfg["backbone"]["query_vocab"], **cfg["data"])


def _model_from_cfg(cfg: dict, variant: str | None = None) -> RecModel:
    head = dict(cfg["head"])
    if variant is not None:
        head["variant"] = variant
    return RecModel(BackboneConfig(radices=tuple(cfg["radices"]), seed=cfg["seed"], **cfg["backbone"]),
                    HeadConfig(**head))


def save_model(model: RecModel, path: Path) -> None:
    model.save(path)
    Path(str(path) + ".json").write_text(json.dumps(model.config_dict(), indent=2), encoding="utf-8")


def load_model(path) -> RecModel:
    p = _need(path, "checkpoint")
    meta = Path(str(p) + ".json")
    if not meta.exists():
        raise MissingPathError(str(meta))
    d = json.loads(meta.read_text(encoding="utf-8"))
    return RecModel(BackboneConfig(**d["backbone"]), HeadConfig(**d["head"])).load(p)


def _load_ids(cfg: dict) -> dict:
    return load_semantic_ids(_need(cfg["paths"]["ids"], "ids"))


def _load_vocab(cfg: dict, ids: dict | None, radices) -> VocabularySet:
    if cfg["paths"]["vocab"] is not None:
        return VocabularySet.load(_need(cfg["paths"]["vocab"], "vocab"), radices)
    if ids is None:
        raise ConfigError("need paths.vocab or paths.ids to build the vocabulary")
    return VocabularySet.from_ids(ids.values(), radices)


def _load_split(cfg: dict):
    ids = _load_ids(cfg)
    log_ = InteractionLog.load(_need(cfg["paths"]["log"], "log"))
    missing = sorted({i for seq in log_.users.values() for i, _ in seq} - set(ids))
    if missing:
        raise ConfigError(f"{len(missing)} logged items have no semantic id (e.g. {missing[0]!r})")
    return ids, split(log_, ids)


def _eval_examples(cfg: dict, sp):
    ex = sp.test if cfg["decode"]["split"] == "test" else sp.valid
    limit = cfg["decode"]["limit"]
    return ex[:limit] if limit else ex


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: dict, out: Path, args) -> int:
    try:
        data = generate(_synthetic_spec(cfg))
    except DataSpecError as exc:
        raise ConfigError(str(exc)) from exc
    data.catalog.save(out / "catalog.tsv")
    data.log.save(out / "interactions.tsv")
    save_semantic_ids(out / "latent_ids.tsv", data.catalog.id_map("latent"))
    print(f"wrote {len(data.catalog)} items, {len(data.log)} users, "
          f"{data.log.n_interactions()} interactions to {out}")
    return 0


def cmd_tokenize(cfg: dict, out: Path, args) -> int:
    catalog = ItemCatalog.load(_need(cfg["paths"]["catalog"], "catalog"))
    rq = ResidualQuantizer(tuple(cfg["radices"]), cfg["tokenizer"]["max_iter"], cfg["seed"])
    codes = rq.fit_transform(catalog)
    rq.codebooks_.save(out / "codebooks.ckpt")
    save_semantic_ids(out / "semantic_ids.tsv", dict(zip(catalog.item_ids, codes.tolist())))
    vocab, collisions = rq.build_vocabulary(catalog)
    vocab.save(out / "vocab.txt")
    stats = {"items": len(catalog), "vocab_size": len(vocab), "collisions": collisions,
             "density": vocab.density, "duplicate_centroids": bool(rq.duplicate_centroids_)}
    _write_json(out / "tokenize.json", stats)
    print(json.dumps(stats))
    return 0


def cmd_train(cfg: dict, out: Path, args) -> int:
    _, sp = _load_split(cfg)
    model = _model_from_cfg(cfg)
    tcfg = TrainConfig(seed=cfg["seed"], **cfg["train"])

    def report(epoch, totals):
        print(f"epoch {epoch + 1}: loss {totals[0]:.4f} head {totals[1]:.4f} lm {totals[2]:.4f}",
              flush=True)

    Trainer(model, tcfg).fit(sp.train, callback=report)
    save_model(model, out / "model.ckpt")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def _decoder(cfg: dict, model: RecModel, vocab, name=None, verify=None, K=None) -> Decoder:
    d = cfg["decode"]
    name = name or d["decoder"]
    draft = None
    if name == "sd":
        draft = load_model(cfg["paths"]["draft"]) if cfg["paths"]["draft"] else model
    return Decoder(name, model, vocab, draft=draft, K=K or d["K"],
                   verify=d["verify"] if verify is None else verify, pad_policy=d["pad_policy"])


def cmd_eval(cfg: dict, out: Path, args) -> int:
    model = load_model(cfg["paths"]["checkpoint"])
    ids, sp = _load_split(cfg)
    vocab = _load_vocab(cfg, ids, model.radices)
    examples = _eval_examples(cfg, sp)
    rep = evaluate(_decoder(cfg, model, vocab), examples, vocab)
    result = rep.to_dict()
    _write_json(out / "metrics.json", result)
    print(json.dumps(result, sort_keys=True))
    return 0


def _read_requests(cfg: dict):
    src = cfg["paths"]["input"]
    if src in (None, "-"):
        lines = sys.stdin.read().splitlines()
    else:
        lines = _need(src, "input").read_text(encoding="utf-8").splitlines()
    for lineno, raw in enumerate(lines, 1):
        if raw.strip():
            try:
                yield json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"request line {lineno}: {exc}") from exc


def cmd_infer(cfg: dict, out: Path, args) -> int:
    model = load_model(cfg["paths"]["checkpoint"])
    ids = _load_ids(cfg) if cfg["paths"]["ids"] else None
    verify = cfg["decode"]["verify"] and cfg["decode"]["decoder"] == "nezha"
    vocab = _load_vocab(cfg, ids, model.radices) if verify or ids else None
    items_by_sid: dict = {}
    for item, sid in (ids or {}).items():
        items_by_sid.setdefault(tuple(sid), []).append(item)
    dec = _decoder(cfg, model, vocab)
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for i, req in enumerate(_read_requests(cfg)):
            history = req.get("history", [])
            if "history_items" in req:
                if ids is None:
                    raise ConfigError("history_items needs paths.ids")
                history = [ids[str(h)] for h in req["history_items"]]
            r = DecodeRequest(req.get("query", ()), history, K=req.get("K", dec.K),
                              verify=dec.verifying, pad_policy=dec.pad_policy)
            rec = dec(r).to_record(model.radices)
            rec["request"] = req.get("id", i)
            if ids is not None:
                rec["item_ids"] = [items_by_sid.get(tuple(s), []) for s in rec["items"]]
            line = json.dumps(rec)
            fh.write(line + "\n")
            print(line)
    return 0


def cmd_bench(cfg: dict, out: Path, args) -> int:
    model = load_model(cfg["paths"]["checkpoint"])
    ids, sp = _load_split(cfg)
    vocab = _load_vocab(cfg, ids, model.radices)
    examples = _eval_examples(cfg, sp)[: cfg["bench"]["requests"]]
    if not examples:
        raise ConfigError("benchmark slice is empty")
    K = cfg["decode"]["K"]
    decoders = {name: _decoder(cfg, model, vocab, name=name, K=K) for name in cfg["bench"]["decoders"]}
    report = benchmark(decoders, examples, repetitions=cfg["bench"]["repetitions"],
                       baseline="beam" if "beam" in decoders else None)
    (out / "bench.txt").write_text(report.table() + "\n", encoding="utf-8")
    (out / "bench.jsonl").write_text(report.jsonl(), encoding="utf-8")
    print(report.table())
    return 0


ABLATION_LABELS = {
    "nezha": "NEZHA",
    "nezha-1": "NEZHA-1 (no state)",
    "nezha-2": "NEZHA-2 (no placeholder)",
    "nezha-3": "NEZHA-3 (additive transition)",
    "nezha-4": "NEZHA-4 (no verification)",
}


def cmd_ablate(cfg: dict, out: Path, args) -> int:
    if cfg["paths"]["log"] and cfg["paths"]["ids"]:
        ids, sp = _load_split(cfg)
        vocab = _load_vocab(cfg, ids, tuple(cfg["radices"]))
    else:
        try:
            data = generate(_synthetic_spec(cfg))
        except DataSpecError as exc:
            raise ConfigError(str(exc)) from exc
        ids = data.catalog.id_map("latent")
        sp = split(data.log, ids)
        vocab = VocabularySet.from_ids(ids.values(), data.radices)
    examples = _eval_examples(cfg, sp)
    tcfg = TrainConfig(seed=cfg["seed"], **cfg["train"])
    trained: dict = {}
    rows = []
    for name in cfg["ablate"]["variants"]:
        if name not in ABLATION_LABELS:
            raise ConfigError(f"unknown ablation variant {name!r}")
        arch = "nezha" if name == "nezha-4" else name
        if arch not in trained:
            model = _model_from_cfg(cfg, arch)
            Trainer(model, tcfg).fit(sp.train)
            trained[arch] = model
        dec = Decoder("nezha", trained[arch], vocab, K=cfg["decode"]["K"], verify=name != "nezha-4",
                      pad_policy=cfg["decode"]["pad_policy"])
        rep = evaluate(dec, examples, vocab)
        row = {"variant": ABLATION_LABELS[name], **rep.row(), "valid_pre": rep.valid_pre}
        rows.append(row)
        log.info("ablate %s: %s", name, row)
    cols = ["H@5", "H@10", "N@5", "N@10", "LT"]
    width = max(len(r["variant"]) for r in rows)
    lines = ["variant".ljust(width) + "".join(c.rjust(10) for c in cols)]
    for r in rows:
        cells = [f"{r[c]:.4f}" if c != "LT" else f"{1e3 * r[c]:.3f}ms" for c in cols]
        lines.append(r["variant"].ljust(width) + "".join(c.rjust(10) for c in cells))
    table = "\n".join(lines)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    (out / "ablation.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    print(table)
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic catalogue and interaction log"),
    "tokenize": (cmd_tokenize, "fit residual k-means codebooks and write semantic ids + vocabulary"),
    "train": (cmd_train, "train backbone and draft head on a log + semantic ids"),
    "infer": (cmd_infer, "decode JSON-lines requests from a file or stdin"),
    "eval": (cmd_eval, "H@K / N@K / latency on the leave-one-out split"),
    "bench": (cmd_bench, "latency breakdown (prefill / decode / system) per decoder"),
    "ablate": (cmd_ablate, "train and evaluate the five head variants under one seed"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nezha", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key, e.g. --set train.lr=0.001 (repeatable)")
        p.add_argument("--run-dir", help="output directory (default: $NEZHA_RUN_DIR/<name>-<time>-<hash>)")
        p.add_argument("--seed", type=int, help="global seed (data, init, shuffling)")
        p.add_argument("--threads", type=int, help="BLAS thread limit")
        p.add_argument("--radices", type=int, nargs="+", help="codebook size per code position")
        p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
        if name in ("gen-data", "ablate"):
            p.add_argument("--n-users", dest="n_users", type=int, help="synthetic users")
            p.add_argument("--n-items", dest="n_items", type=int, help="synthetic items")
            p.add_argument("--mode", choices=["chained", "independent"], help="synthetic id layout")
        if name == "tokenize":
            p.add_argument("--catalog", help="catalog file (item<TAB>floats)")
        if name in ("train", "eval", "bench", "ablate", "infer"):
            p.add_argument("--log", help="interaction log file")
            p.add_argument("--ids", help="semantic id file (item<TAB>codes)")
        if name in ("train", "ablate"):
            p.add_argument("--variant", help="head variant (nezha, nezha-1 .. nezha-3, mtp)")
            p.add_argument("--epochs", type=int, help="training epochs")
        if name in ("eval", "bench", "infer", "ablate"):
            p.add_argument("--vocab", help="vocabulary file")
            p.add_argument("--k", type=int, help="beam size (default 10; 512 for bench)")
            p.add_argument("--split", choices=["test", "valid"], help="evaluation split")
            p.add_argument("--limit", type=int, help="evaluate only the first N users (0 = all)")
        if name in ("eval", "bench", "infer"):
            p.add_argument("--checkpoint", help="model checkpoint (with .json sidecar)")
            p.add_argument("--draft", help="draft checkpoint for --decoder sd (default: target)")
            p.add_argument("--no-verify", dest="no_verify", action="store_true",
                           help="disable vocabulary verification")
        if name in ("eval", "infer"):
            p.add_argument("--decoder", choices=["beam", "sd", "nezha"], help="decoding strategy")
        if name == "infer":
            p.add_argument("--input", help="JSON-lines request file ('-' or omitted: stdin)")
        if name == "bench":
            p.add_argument("--repetitions", type=int, help="timing repetitions")
            p.add_argument("--requests", type=int, help="requests per repetition")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = make_run_dir(args, cfg)
        with threadpool_limits(limits=cfg["threads"]):
            return COMMANDS[args.subcommand][0](cfg, out, args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPathError as exc:
        print(f"missing path: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
