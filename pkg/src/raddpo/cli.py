"""Command-line entry point.

    raddpo build-sids --seed 0 --out runs/sids
    raddpo gen-data --catalog runs/sids --seed 7 --out runs/data
    raddpo train --stage sft --data runs/data --out runs/sft
    raddpo train --stage align --method rad_dpo --init runs/sft --data runs/data --out runs/rad
    raddpo eval --checkpoint runs/rad --data runs/data --constrained --out runs/eval_rad
    raddpo compare --reports runs/eval_sft runs/eval_rad --out runs/table
    raddpo run-manifest configs/ablation.json

Every output directory gets a ``provenance.json`` with the effective config,
its hash, the hashes of all inputs and outputs, the corpus hash and the code
version.  Configs are JSON.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import fields
from pathlib import Path

from . import datagen as D
from . import evaluation as E
from . import model as M
from . import train as T
from .sid import Catalog, Vocab, catalog_digest, residual_errors, rq_kmeans_fit

__version__ = "0.1.0"

log = logging.getLogger("raddpo")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED, EXIT_HASH = 0, 2, 3, 4, 5
PROVENANCE = "provenance.json"


class CliError(Exception):
    code = 1


class ConfigError(CliError):
    code = EXIT_CONFIG


class MissingInput(CliError):
    code = EXIT_MISSING


class HashMismatch(CliError):
    code = EXIT_HASH


# ----------------------------------------------------------------------------
# hashing and provenance

def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def code_version() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def read_provenance(d: Path) -> dict | None:
    p = Path(d) / PROVENANCE
    if not p.exists():
        return None
    return json.loads(p.read_text())


def write_provenance(out: Path, command: str, cfg: dict, inputs: dict[str, Path], outputs: list[str],
                     corpus_hash: str = "") -> dict:
    rec = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "inputs": {k: file_hash(v) for k, v in sorted(inputs.items())},
        "outputs": {name: file_hash(out / name) for name in sorted(outputs)},
        "corpus_hash": corpus_hash,
        "code_version": code_version(),
    }
    (out / PROVENANCE).write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")
    return rec


def input_file(d, name: str) -> Path:
    """An upstream artifact, verified against the hash its producer recorded."""
    d = Path(d)
    p = d / name
    if not p.exists():
        raise MissingInput(f"missing input {p}")
    prov = read_provenance(d)
    if prov is not None and name in prov["outputs"] and prov["outputs"][name] != file_hash(p):
        raise HashMismatch(f"{p} does not match the hash recorded in {d / PROVENANCE}")
    return p


def is_current(out: Path, command: str, cfg: dict, inputs: dict[str, Path]) -> bool:
    prov = read_provenance(out)
    if prov is None or prov["command"] != command or prov["config_hash"] != config_hash(cfg):
        return False
    if prov["code_version"] != code_version():
        return False
    if prov["inputs"] != {k: file_hash(v) for k, v in sorted(inputs.items())}:
        return False
    return all((out / n).exists() and file_hash(out / n) == h for n, h in prov["outputs"].items())


# ----------------------------------------------------------------------------
# config handling

def merge(defaults: dict, overrides: dict, what: str) -> dict:
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(overrides)
    return out


SIDS_DEFAULTS = {"n_items": 1200, "dim": 16, "sizes": [8, 8, 8], "active_leaf": 0.6, "max_iter": 50, "n_init": 8}
DATA_EXTRA = {"test_sessions": 5000, "test_day": 7}


def model_defaults() -> dict:
    return {f.name: f.default for f in fields(M.ModelConfig) if f.name != "vocab_size"}


def sids_config(raw: dict, seed: int) -> dict:
    return merge(SIDS_DEFAULTS, raw, "build-sids") | {"seed": seed}


def data_config(raw: dict, seed: int) -> dict:
    cfg = merge({**D.GenConfig().to_dict(), **DATA_EXTRA}, raw, "gen-data") | {"seed": seed}
    cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}
    gen_config(cfg)  # validate early
    return cfg


def gen_config(cfg: dict, **over) -> D.GenConfig:
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items() if k not in DATA_EXTRA}
    try:
        return D.GenConfig(**{**d, **over})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def train_config(raw: dict, stage: str, method: str, seed: int, tlgd: bool, rdrw: bool, mlsft: bool) -> dict:
    raw = dict(raw)
    model = merge(model_defaults(), raw.pop("model", {}), "model") | {"seed": seed}
    base = T.TrainConfig().to_dict()
    loss = merge(base.pop("loss"), raw.pop("loss", {}), "loss")
    tr = merge(base, raw, "train") | {"stage": stage, "method": method if stage == "align" else "sft_only",
                                      "seed": seed}
    if stage == "align":
        loss |= {"enable_tlgd": tlgd, "enable_rdrw": rdrw, "enable_multilabel_sft": mlsft}
    tr["loss"] = loss
    try:
        T.TrainConfig.from_dict(tr)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return {"model": model, "train": tr}


def load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"config file {p} not found")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return cfg


# ----------------------------------------------------------------------------
# subcommands; each takes resolved options and returns the provenance record

def build_sids(cfg: dict, out: Path) -> dict:
    emb = D.synthetic_item_embeddings(cfg["n_items"], cfg["dim"], tuple(cfg["sizes"]), cfg["active_leaf"],
                                      seed=cfg["seed"])
    try:
        books = rq_kmeans_fit(emb, cfg["sizes"], seed=cfg["seed"], max_iter=cfg["max_iter"], n_init=cfg["n_init"])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    catalog = Catalog.build(emb, books)
    catalog.save(out / "catalog.jsonl")
    books.save(out / "codebooks.npz")
    errs = residual_errors(emb, books)
    (out / "sid_stats.json").write_text(json.dumps(
        {"catalog_digest": catalog_digest(catalog), "n_items": len(catalog.item_sid), "n_sids": len(catalog.sids),
         "residual_mse": errs}, indent=1) + "\n")
    log.info("catalog: %d items on %d SIDs, residual %s", len(catalog.item_sid), len(catalog.sids),
             ", ".join(f"{e:.4f}" for e in errs))
    return write_provenance(out, "build-sids", cfg, {}, ["catalog.jsonl", "codebooks.npz", "sid_stats.json"])


def gen_data(cfg: dict, catalog_dir: Path, out: Path) -> dict:
    cat_path = input_file(catalog_dir, "catalog.jsonl")
    catalog = Catalog.load(cat_path)
    # a copy travels with the corpus so eval needs only the data directory
    shutil.copyfile(cat_path, out / "catalog.jsonl")
    train_cfg = gen_config(cfg)
    test_cfg = gen_config(cfg, sessions=cfg["test_sessions"], day=cfg["test_day"])
    try:
        train, oracle = D.generate(catalog, train_cfg)
        test, _ = D.generate(catalog, test_cfg, oracle)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    h = D.save_corpus(out / "train.jsonl", train, train_cfg)
    D.save_corpus(out / "test.jsonl", test, test_cfg)
    D.save_oracle(out / "train_oracle.jsonl", oracle, train)
    D.save_oracle(out / "test_oracle.jsonl", oracle, test)
    vocab = Vocab(train_cfg.n_queries, tuple(catalog.sizes))
    (out / "vocab.json").write_text(vocab.to_json() + "\n")
    shares = D.pair_prefix_stats(train)
    log.info("%d train / %d test sessions, pseudo rate %.3f, prefix shares %s", len(train), len(test),
             D.pseudo_rate(train), ", ".join(f"{s:.3f}" for s in shares))
    return write_provenance(out, "gen-data", cfg, {"catalog": cat_path},
                            ["catalog.jsonl", "train.jsonl", "test.jsonl", "train_oracle.jsonl", "test_oracle.jsonl",
                             "vocab.json"],
                            corpus_hash=h)


def load_data(data_dir: Path, split: str):
    corpus = input_file(data_dir, f"{split}.jsonl")
    oracle_path = input_file(data_dir, f"{split}_oracle.jsonl")
    sessions, cfg = D.load_corpus(corpus, oracle_path)
    oracle, _ = D.load_oracle(oracle_path)
    vocab = Vocab.from_json(input_file(data_dir, "vocab.json").read_text())
    return sessions, cfg, oracle, vocab, {split: corpus, f"{split}_oracle": oracle_path}


def train(cfg: dict, data_dir: Path, init_dir: Path | None, out: Path) -> dict:
    sessions, gcfg, _, vocab, inputs = load_data(data_dir, "train")
    mcfg = M.ModelConfig(vocab_size=vocab.size, **cfg["model"])
    tcfg = T.TrainConfig.from_dict(cfg["train"])
    if tcfg.stage == "align":
        if init_dir is None:
            raise ConfigError("alignment needs --init (an SFT checkpoint directory)")
        ckpt = input_file(init_dir, "model.npz")
        inputs["init"] = ckpt
        params, init_cfg, _ = M.load_checkpoint(ckpt)
        if init_cfg.vocab_size != vocab.size:
            raise ConfigError(f"init checkpoint vocab {init_cfg.vocab_size} != data vocab {vocab.size}")
        # the architecture comes from the checkpoint
        mcfg = init_cfg
    else:
        params = M.init_params(mcfg)
    runner = T.run_sft if tcfg.stage == "sft" else T.run_alignment
    res = runner(tcfg, sessions, vocab, mcfg, params)
    M.save_checkpoint(out / "model.npz", res.params, mcfg,
                      {"method": tcfg.method, "stage": tcfg.stage, "steps": tcfg.steps})
    T.write_trace(out / "trace.jsonl", res.curve)
    outputs = ["model.npz", "trace.jsonl"]
    if res.stats_trace:
        T.write_trace(out / "stats.jsonl", res.stats_trace)
        outputs.append("stats.jsonl")
    (out / "summary.json").write_text(json.dumps(
        {"n_param_sets": res.n_param_sets, "final": res.curve[-1] if res.curve else {}}, sort_keys=True) + "\n")
    outputs.append("summary.json")
    last = res.curve[-1]["loss"] if res.curve else float("nan")
    log.info("%s %s: %d steps, final loss %.4f, %d parameter set(s)", tcfg.stage, tcfg.method, tcfg.steps, last,
             res.n_param_sets)
    return write_provenance(out, "train", cfg, inputs, outputs, corpus_hash=D.corpus_hash(sessions, gcfg))


def evaluate(cfg: dict, ckpt_dir: Path, data_dir: Path, out: Path, plot: bool = False) -> dict:
    sessions, gcfg, oracle, vocab, inputs = load_data(data_dir, "test")
    inputs["catalog"] = input_file(data_dir, "catalog.jsonl")
    catalog = Catalog.load(inputs["catalog"])
    ckpt = input_file(ckpt_dir, "model.npz")
    inputs["checkpoint"] = ckpt
    params, mcfg, meta = M.load_checkpoint(ckpt)
    method = cfg["method"] or meta.get("method", "")
    h = D.corpus_hash(sessions, gcfg)
    try:
        rep = E.evaluate(params, mcfg, vocab, sessions, catalog, oracle, width=cfg["beam_width"],
                         constrained=cfg["constrained"], method=method, corpus_hash=h)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    rep.seeds = [mcfg.seed]
    E.write_reports(out / "report.jsonl", [rep])
    outputs = ["report.jsonl"]
    if plot:
        m = rep.metrics()
        (out / "metrics.svg").write_text(bar_chart_svg(list(m), [m[k] for k in m], f"{method} on {h}"))
        outputs.append("metrics.svg")
    log.info("%s: %s", method, "  ".join(f"{k}={v:.4f}" for k, v in rep.metrics().items()))
    return write_provenance(out, "eval", cfg, inputs, outputs, corpus_hash=h)


def compare(cfg: dict, report_dirs: list[Path], out: Path, plot: bool = False) -> dict:
    inputs, reports = {}, []
    for i, d in enumerate(report_dirs):
        p = input_file(d, "report.jsonl")
        inputs[f"report{i}"] = p
        reports.extend(E.read_reports(p))
    try:
        text, records = E.compare(reports, cfg["baseline"])
    except ValueError as e:
        if len({r.corpus_hash for r in reports}) > 1:
            raise HashMismatch(str(e)) from e
        raise ConfigError(str(e)) from e
    (out / "table.txt").write_text(text + "\n")
    with open(out / "compare.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    outputs = ["table.txt", "compare.jsonl"]
    if plot:
        key = cfg.get("plot_metric", "sid_R@8")
        (out / "compare.svg").write_text(bar_chart_svg([r["method"] for r in records], [r[key] for r in records],
                                                       key))
        outputs.append("compare.svg")
    print(text)
    return write_provenance(out, "compare", cfg, inputs, outputs, corpus_hash=reports[0].corpus_hash)


def bar_chart_svg(labels: list[str], values: list[float], title: str) -> str:
    bw, gap, h, pad = 48, 16, 200, 40
    top = max(max(values), 1e-12)
    w = pad * 2 + len(values) * (bw + gap)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h + 2 * pad + 40}" '
             f'font-family="sans-serif" font-size="10">',
             f'<text x="{pad}" y="{pad // 2}" font-size="12">{title}</text>']
    for i, (lab, v) in enumerate(zip(labels, values)):
        x = pad + i * (bw + gap)
        bh = h * max(v, 0.0) / top
        y = pad + h - bh
        parts.append(f'<rect x="{x}" y="{y:.1f}" width="{bw}" height="{bh:.1f}" fill="#4c72b0"/>')
        parts.append(f'<text x="{x + bw / 2}" y="{y - 3:.1f}" text-anchor="middle">{v:.4f}</text>')
        parts.append(f'<text x="{x + bw / 2}" y="{pad + h + 14}" text-anchor="middle">{lab}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ----------------------------------------------------------------------------
# dispatch

def run_step(command: str, opts: dict, out: Path, force: bool = True) -> tuple[dict, bool]:
    """Resolve config, skip if ``out`` is already current, else run.  Returns (provenance, ran)."""
    raw = opts.get("config") or {}
    seed = opts.get("seed", 0)
    out.mkdir(parents=True, exist_ok=True)
    if command == "build-sids":
        cfg, inputs = sids_config(raw, seed), {}
        fn = lambda: build_sids(cfg, out)  # noqa: E731
    elif command == "gen-data":
        cat_dir = required(opts, "catalog")
        cfg = data_config(raw, seed)
        inputs = {"catalog": input_file(cat_dir, "catalog.jsonl")}
        fn = lambda: gen_data(cfg, Path(cat_dir), out)  # noqa: E731
    elif command == "train":
        data_dir = required(opts, "data")
        stage = opts.get("stage", "align")
        cfg = train_config(raw, stage, opts.get("method", "rad_dpo"), seed, not opts.get("no_tlgd", False),
                           not opts.get("no_rdrw", False), not opts.get("no_mlsft", False))
        inputs = {"train": input_file(data_dir, "train.jsonl"), "train_oracle": input_file(data_dir, "train_oracle.jsonl")}
        init = opts.get("init")
        if stage == "align" and init is not None:
            inputs["init"] = input_file(init, "model.npz")
        fn = lambda: train(cfg, Path(data_dir), Path(init) if init else None, out)  # noqa: E731
    elif command == "eval":
        ckpt_dir, data_dir = required(opts, "checkpoint"), required(opts, "data")
        cfg = merge({"beam_width": 128, "method": ""}, raw, "eval") | {
            "beam_width": opts.get("beam_width") or raw.get("beam_width", 128),
            "constrained": bool(opts.get("constrained", False))}
        if opts.get("method_label"):
            cfg["method"] = opts["method_label"]
        inputs = {"test": input_file(data_dir, "test.jsonl"), "test_oracle": input_file(data_dir, "test_oracle.jsonl"),
                  "catalog": input_file(data_dir, "catalog.jsonl"), "checkpoint": input_file(ckpt_dir, "model.npz")}
        fn = lambda: evaluate(cfg, Path(ckpt_dir), Path(data_dir), out, opts.get("plot", False))  # noqa: E731
    elif command == "compare":
        dirs = [Path(d) for d in required(opts, "reports")]
        cfg = merge({"baseline": None, "plot_metric": "sid_R@8"}, raw, "compare")
        inputs = {f"report{i}": input_file(d, "report.jsonl") for i, d in enumerate(dirs)}
        fn = lambda: compare(cfg, dirs, out, opts.get("plot", False))  # noqa: E731
    else:
        raise ConfigError(f"unknown command {command!r}")
    if not force and is_current(out, command, cfg, inputs):
        log.info("%s: up to date, skipping", out)
        return read_provenance(out), False
    return fn(), True


def required(opts: dict, key: str):
    if opts.get(key) is None:
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    return opts[key]


MANIFEST_REFS = ("catalog", "data", "init", "checkpoint")


def run_manifest(path, root: Path | None = None) -> list[tuple[str, bool]]:
    """Run each step in order; steps whose outputs are current are skipped."""
    manifest = load_config_file(path)
    steps = manifest.get("steps")
    if not isinstance(steps, list) or not steps:
        raise ConfigError("manifest needs a nonempty 'steps' list")
    root = Path(root or manifest.get("root") or Path(path).with_suffix(""))
    seed = manifest.get("seed", 0)
    produced: dict[str, Path] = {}
    done = []
    for i, step in enumerate(steps):
        step = dict(step)
        name, command = step.pop("name", None), step.pop("cmd", None)
        if not name or not command:
            raise ConfigError(f"step {i} needs 'name' and 'cmd'")
        if name in produced:
            raise ConfigError(f"duplicate step name {name!r}")
        opts = {"seed": step.pop("seed", seed), "config": step.pop("config", {})}
        for flag in step.pop("flags", []):
            opts[flag.lstrip("-").replace("-", "_")] = True
        for key in MANIFEST_REFS:
            if key in step:
                opts[key] = resolve_ref(step.pop(key), produced, name)
        if "reports" in step:
            opts["reports"] = [resolve_ref(r, produced, name) for r in step.pop("reports")]
        if "method" in step:
            opts["method" if command == "train" else "method_label"] = step.pop("method")
        opts.update({k.replace("-", "_"): v for k, v in step.items()})
        out = root / name
        _, ran = run_step(command, opts, out, force=False)
        produced[name] = out
        done.append((name, ran))
    return done


def resolve_ref(ref: str, produced: dict[str, Path], step: str) -> Path:
    if ref not in produced:
        raise ConfigError(f"step {step!r} refers to {ref!r}, which is not produced by an earlier step")
    return produced[ref]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="raddpo", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON config file")
        if seed:
            p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, type=Path)

    common(sub.add_parser("build-sids", help="fit RQ-kmeans codebooks and build the catalog"))
    p = sub.add_parser("gen-data", help="simulate train/test session corpora")
    common(p)
    p.add_argument("--catalog", required=True, type=Path, help="build-sids output directory")
    p = sub.add_parser("train", help="SFT or alignment training")
    common(p)
    p.add_argument("--stage", choices=["sft", "align"], default="align")
    p.add_argument("--method", choices=T.METHODS, default="rad_dpo")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--init", type=Path, help="SFT output directory (alignment only)")
    p.add_argument("--no-tlgd", action="store_true")
    p.add_argument("--no-rdrw", action="store_true")
    p.add_argument("--no-mlsft", action="store_true")
    p = sub.add_parser("eval", help="beam-search decode and score a checkpoint")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--beam-width", type=int)
    p.add_argument("--constrained", action="store_true")
    p.add_argument("--method", dest="method_label", help="label for the report row")
    p.add_argument("--plot", action="store_true", help="also write an SVG bar chart")
    p = sub.add_parser("compare", help="side-by-side table of eval reports")
    common(p, seed=False)
    p.add_argument("--reports", nargs="+", required=True, type=Path)
    p.add_argument("--plot", action="store_true")
    p = sub.add_parser("run-manifest", help="run a pipeline of steps from a JSON manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, help="root directory (default: manifest 'root')")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        if args.command == "run-manifest":
            for name, ran in run_manifest(args.manifest, args.out):
                log.info("%-12s %s", name, "ran" if ran else "skipped")
            return EXIT_OK
        opts = {k: v for k, v in vars(args).items() if k not in ("command", "out", "verbose")}
        opts["config"] = load_config_file(args.config)
        run_step(args.command, opts, args.out)
    except CliError as e:
        log.error("error: %s", e)
        return e.code
    except T.TrainingDiverged as e:
        log.error("error: %s", e)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
