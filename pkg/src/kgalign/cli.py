"""Command-line entry point: ``kgalign <stage> [options]``.

Stages read and write plain files in one run directory; every stage also
writes ``manifest_<stage>.json`` with input hashes, the resolved
configuration, package versions and the seed. ``pipeline`` runs
mine -> train -> calibrate -> align -> eval.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .calibrate import CalibrationReport, GridPoint
from .evaluate import CSV_HEADER, config_hash
from .kg import (DataError, GoldLabels, SynthConfig, l2_normalize, load_embeddings, load_kg, read_dangling,
                 read_pairs, synth_kg_pair, write_dangling, write_embeddings, write_kg, write_pairs)
from .otp import AlignmentResult
from .pipeline import (MODES, NEEDS_TRAIN_GOLD, PipelineConfig, align_stage, calibrate_stage,
                       evaluate_arrays, mine_stage, validate_modes)
from .similarity import PseudoPairSet, build_candidate_set
from .trainer import TrainConfig, train

log = logging.getLogger("kgalign")

STAGES = ("synth", "mine", "train", "calibrate", "align", "eval", "pipeline")
PRODUCER = {
    "pseudo_pairs.tsv": "mine",
    "refined_src.tsv": "train",
    "refined_tgt.tsv": "train",
    "calibration.json": "calibrate",
    "alignment.json": "align",
}


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path}; run `kgalign {producer}` first")
        self.path, self.producer = path, producer


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def default_config() -> dict:
    return {
        "data_dir": None,
        "src_entities": None, "src_triples": None, "src_embeddings": None,
        "tgt_entities": None, "tgt_triples": None, "tgt_embeddings": None,
        "gold_dir": None,
        "out": "run",
        "seed": 0,
        "modes": ["ued"],
        "epsilon": 0.99,
        "k_guidance": 3,
        "K": 100,
        "K_search": 10,
        "grid_size": 100,
        "train_fraction": 0.3,
        "train": {f.name: f.default for f in dataclasses.fields(TrainConfig)
                  if f.name not in ("seed", "supervised_pairs", "k_guidance")},
        "synth": {f.name: f.default for f in dataclasses.fields(SynthConfig) if f.name != "seed"},
    }


def _set_dotted(cfg: dict, key: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings need no quoting
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _merge(base: dict, upd: dict, prefix: str = "") -> None:
    for k, v in upd.items():
        if k not in base:
            raise ConfigError(f"unknown config key {prefix + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v


def resolve_config(args) -> tuple[dict, list]:
    """File, then ``--set`` overrides, then the dedicated flags. Returns (config, overrides)."""
    cfg = default_config()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            try:
                _merge(cfg, json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: {exc}") from None
    overrides = []
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_dotted(cfg, key.strip(), raw)
        overrides.append(item)
    for flag, key in (("seed", "seed"), ("K", "K"), ("epsilon", "epsilon"), ("out", "out"),
                      ("data", "data_dir"), ("gold", "gold_dir")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
            overrides.append(f"--{flag}={val}")
    if getattr(args, "mode", None):
        cfg["modes"] = sorted(set(args.mode))
        overrides.append("--mode=" + ",".join(cfg["modes"]))
    if cfg["data_dir"]:
        d = Path(cfg["data_dir"])
        for side in ("src", "tgt"):
            for kind, fname in (("entities", "entities.txt"), ("triples", "triples.tsv"),
                                ("embeddings", "embeddings.tsv")):
                key = f"{side}_{kind}"
                if cfg[key] is None:
                    cfg[key] = str(d / side / fname)
        if cfg["gold_dir"] is None and (d / "gold").is_dir():
            cfg["gold_dir"] = str(d / "gold")
    return cfg, overrides


def pipeline_config(cfg: dict) -> PipelineConfig:
    try:
        tc = TrainConfig(**cfg["train"], seed=int(cfg["seed"]), k_guidance=int(cfg["k_guidance"]))
        return PipelineConfig(epsilon=float(cfg["epsilon"]), k_guidance=int(cfg["k_guidance"]), K=int(cfg["K"]),
                              K_search=int(cfg["K_search"]), grid_size=int(cfg["grid_size"]), train=tc,
                              modes=frozenset(cfg["modes"]))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# manifests


def run_hash(cfg: dict) -> str:
    """Hash of everything that defines the experiment; the run directory itself is excluded."""
    return config_hash({k: v for k, v in cfg.items() if k != "out"})


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    return {"kgalign": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _manifest(stage: str, cfg: dict, overrides: list, inputs: dict, outputs: list, root: Path) -> dict:
    return {
        "stage": stage,
        "config": cfg,
        "config_hash": run_hash(cfg),
        "overrides": overrides,
        "inputs": {name: sha256_file(p) for name, p in sorted(inputs.items())},
        "outputs": {Path(p).relative_to(root).as_posix(): sha256_file(p) for p in sorted(map(Path, outputs))},
        "versions": versions(),
        "seed": cfg["seed"],
    }


def write_manifest(out: Path, stage: str, cfg, overrides, inputs, outputs) -> None:
    m = _manifest(stage, cfg, overrides, inputs, outputs, out)
    with open(out / f"manifest_{stage}.json", "w", encoding="utf-8") as fh:
        json.dump(m, fh, indent=2, sort_keys=True)
        fh.write("\n")


def up_to_date(out: Path, stage: str, cfg: dict, inputs: dict) -> bool:
    """True when a previous run of ``stage`` used the same config and inputs and its outputs are intact."""
    path = out / f"manifest_{stage}.json"
    if not path.exists():
        return False
    with open(path, encoding="utf-8") as fh:
        old = json.load(fh)
    if old.get("config_hash") != run_hash(cfg):
        return False
    if old.get("inputs") != {name: sha256_file(p) for name, p in sorted(inputs.items())}:
        return False
    return all((out / name).exists() and sha256_file(out / name) == h for name, h in old["outputs"].items())


# ---------------------------------------------------------------------------
# loading


class Context:
    """Lazily loaded inputs shared by the stages of one invocation."""

    def __init__(self, cfg: dict, overrides: list, resume: bool = False):
        self.cfg, self.overrides, self.resume = cfg, overrides, resume
        self.out = Path(cfg["out"])
        self.pcfg = pipeline_config(cfg)
        self._kgs = None
        self._gold = None

    def _need(self, key: str) -> str:
        p = self.cfg.get(key)
        if not p:
            raise ConfigError(f"config key {key!r} is not set (or pass --data)")
        if not Path(p).exists():
            raise FileNotFoundError(f"{key}: {p} does not exist")
        return p

    def data_inputs(self) -> dict:
        return {k: self._need(k) for k in ("src_entities", "src_triples", "src_embeddings",
                                           "tgt_entities", "tgt_triples", "tgt_embeddings")}

    @property
    def kgs(self):
        if self._kgs is None:
            src = load_kg(self._need("src_triples"), self._need("src_entities"))
            tgt = load_kg(self._need("tgt_triples"), self._need("tgt_entities"))
            self._kgs = (src, tgt)
        return self._kgs

    def embeddings(self):
        src, tgt = self.kgs
        return load_embeddings(self._need("src_embeddings"), src), load_embeddings(self._need("tgt_embeddings"), tgt)

    def artifact(self, name: str) -> Path:
        p = self.out / name
        if not p.exists():
            raise MissingArtifactError(p, PRODUCER.get(name, "pipeline"))
        return p

    def gold_files(self, part: str) -> dict:
        g = self.cfg.get("gold_dir")
        if not g:
            raise ConfigError("this mode/stage needs gold labels: set gold_dir (or pass --gold)")
        g = Path(g)
        files = {f"gold_{part}_pairs": g / f"{part}_pairs.tsv",
                 f"gold_{part}_dangling_src": g / f"{part}_dangling_src.txt",
                 f"gold_{part}_dangling_tgt": g / f"{part}_dangling_tgt.txt"}
        for p in files.values():
            if not p.exists():
                raise FileNotFoundError(f"gold file {p} does not exist")
        return {k: str(v) for k, v in files.items()}

    def gold(self, part: str) -> GoldLabels:
        src, tgt = self.kgs
        f = self.gold_files(part)
        return GoldLabels(tuple(read_pairs(f[f"gold_{part}_pairs"], src, tgt)),
                          frozenset(read_dangling(f[f"gold_{part}_dangling_src"], src)),
                          frozenset(read_dangling(f[f"gold_{part}_dangling_tgt"], tgt)))

    def supervised(self) -> bool:
        return bool(self.pcfg.modes & set(NEEDS_TRAIN_GOLD))

    def run_stage(self, stage: str, inputs: dict, fn) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        if self.resume and up_to_date(self.out, stage, self.cfg, inputs):
            log.info("%s: up to date, skipping", stage)
            return
        outputs = fn()
        write_manifest(self.out, stage, self.cfg, self.overrides, inputs, outputs)


# ---------------------------------------------------------------------------
# stages


def cmd_synth(ctx: Context) -> None:
    cfg = ctx.cfg
    try:
        sc = SynthConfig(**cfg["synth"], seed=int(cfg["seed"]))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    out = ctx.out
    src, tgt, se, te, gold = synth_kg_pair(sc)
    outputs = []
    for side, kg, emb in (("src", src, se), ("tgt", tgt, te)):
        d = out / side
        d.mkdir(parents=True, exist_ok=True)
        write_kg(kg, d / "triples.tsv", d / "entities.txt")
        write_embeddings(d / "embeddings.tsv", kg.entity_ids, emb)
        outputs += [d / "triples.tsv", d / "entities.txt", d / "embeddings.tsv"]
    g = out / "gold"
    g.mkdir(parents=True, exist_ok=True)
    parts = dict(zip(("train", "test"), gold.split(float(cfg["train_fraction"]), int(cfg["seed"]))))
    parts["all"] = gold
    for part, labels in parts.items():
        write_pairs(g / f"{part}_pairs.tsv", labels.pairs, src.entity_ids, tgt.entity_ids)
        write_dangling(g / f"{part}_dangling_src.txt", labels.dangling_src, src.entity_ids)
        write_dangling(g / f"{part}_dangling_tgt.txt", labels.dangling_tgt, tgt.entity_ids)
        outputs += [g / f"{part}_pairs.tsv", g / f"{part}_dangling_src.txt", g / f"{part}_dangling_tgt.txt"]
    write_manifest(out, "synth", cfg, ctx.overrides, {}, outputs)


def cmd_mine(ctx: Context) -> None:
    inputs = ctx.data_inputs()

    def run():
        src, tgt = ctx.kgs
        se, te = ctx.embeddings()
        _, _, pseudo, _ = mine_stage(se, te, ctx.pcfg)
        path = ctx.out / "pseudo_pairs.tsv"
        write_pairs(path, pseudo.pairs(), src.entity_ids, tgt.entity_ids, scores=pseudo.sim)
        log.info("mine: %d pseudo pairs", len(pseudo))
        return [path]

    ctx.run_stage("mine", inputs, run)


def _load_pseudo(ctx: Context) -> PseudoPairSet:
    src, tgt = ctx.kgs
    rows = read_pairs(ctx.artifact("pseudo_pairs.tsv"), src, tgt, with_score=True)
    arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return PseudoPairSet(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2], ctx.pcfg.epsilon)


def cmd_train(ctx: Context) -> None:
    inputs = {**ctx.data_inputs(), "pseudo_pairs": str(ctx.artifact("pseudo_pairs.tsv"))}
    if "ued_star" in ctx.pcfg.modes:
        inputs.update(ctx.gold_files("train"))

    def run():
        src, tgt = ctx.kgs
        se, te = ctx.embeddings()
        if ctx.pcfg.normalize:
            se, te = l2_normalize(se), l2_normalize(te)
        pseudo = _load_pseudo(ctx)
        guidance = build_candidate_set(se, te, ctx.pcfg.k_guidance)
        train_gold = ctx.gold("train") if "ued_star" in ctx.pcfg.modes else None
        refined = train(se, te, src, tgt, pseudo, guidance, ctx.pcfg.effective_train_config(train_gold))
        paths = [ctx.out / "refined_src.tsv", ctx.out / "refined_tgt.tsv", ctx.out / "loss_trace.csv"]
        write_embeddings(paths[0], src.entity_ids, refined.src)
        write_embeddings(paths[1], tgt.entity_ids, refined.tgt)
        refined.write_trace(paths[2])
        return paths

    ctx.run_stage("train", inputs, run)


def _refined(ctx: Context):
    src, tgt = ctx.kgs
    return (load_embeddings(ctx.artifact("refined_src.tsv"), src),
            load_embeddings(ctx.artifact("refined_tgt.tsv"), tgt))


def cmd_calibrate(ctx: Context) -> None:
    inputs = {k: str(ctx.artifact(k)) for k in ("refined_src.tsv", "refined_tgt.tsv")}
    gold_ab = "gold_alpha_beta" in ctx.pcfg.modes
    if gold_ab:
        inputs.update(ctx.gold_files("train"))
    else:
        inputs["pseudo_pairs.tsv"] = str(ctx.artifact("pseudo_pairs.tsv"))

    def run():
        X, Y = _refined(ctx)
        json_path = ctx.out / "calibration.json"
        report = calibrate_stage(X, Y, None if gold_ab else _load_pseudo(ctx), ctx.pcfg,
                                 ctx.gold("train") if gold_ab else None)
        if report is None:
            json_path.write_text(json.dumps({"skipped": True, "modes": sorted(ctx.pcfg.modes)}, indent=2,
                                            sort_keys=True) + "\n", encoding="utf-8")
            return [json_path]
        csv_path = ctx.out / "calibration.csv"
        report.write_csv(csv_path)
        report.write_json(json_path)
        return [csv_path, json_path]

    ctx.run_stage("calibrate", inputs, run)


def _load_calibration(ctx: Context) -> Optional[CalibrationReport]:
    data = json.loads(ctx.artifact("calibration.json").read_text(encoding="utf-8"))
    if data.get("skipped"):
        return None
    best = GridPoint(data["q"], data["alpha"], data["beta"], data["score"], data.get("q_beta"))
    return CalibrationReport([best], best, data["K_used"], data["scored_by"])


def cmd_align(ctx: Context) -> None:
    inputs = {k: str(ctx.artifact(k)) for k in ("refined_src.tsv", "refined_tgt.tsv", "calibration.json")}

    def run():
        src, tgt = ctx.kgs
        X, Y = _refined(ctx)
        result, _ = align_stage(X, Y, ctx.pcfg, _load_calibration(ctx))
        result.write(ctx.out, src.entity_ids, tgt.entity_ids)
        return [ctx.out / n for n in ("matches.tsv", "dangling_src.txt", "dangling_tgt.txt", "alignment.json")]

    ctx.run_stage("align", inputs, run)


def _load_result(ctx: Context) -> AlignmentResult:
    src, tgt = ctx.kgs
    summary = json.loads(ctx.artifact("alignment.json").read_text(encoding="utf-8"))
    matches = sorted(read_pairs(ctx.out / "matches.tsv", src, tgt))
    return AlignmentResult(matches, read_dangling(ctx.out / "dangling_src.txt", src),
                           read_dangling(ctx.out / "dangling_tgt.txt", tgt), summary["objective"],
                           n=src.n_entities, m=tgt.n_entities, alpha=summary.get("alpha"),
                           beta=summary.get("beta"), K=summary.get("K"))


def cmd_eval(ctx: Context) -> None:
    inputs = {k: str(ctx.artifact(k)) for k in ("refined_src.tsv", "refined_tgt.tsv", "alignment.json",
                                                 "calibration.json", "pseudo_pairs.tsv")}
    inputs.update(ctx.gold_files("test"))
    if "distance_baseline" in ctx.pcfg.modes:
        inputs.update(ctx.gold_files("train"))

    def run():
        X, Y = _refined(ctx)
        calib = json.loads((ctx.out / "calibration.json").read_text(encoding="utf-8"))
        n_pseudo = sum(1 for line in open(ctx.out / "pseudo_pairs.tsv", encoding="utf-8") if line.strip())
        train_gold = ctx.gold("train") if "distance_baseline" in ctx.pcfg.modes else None
        report = evaluate_arrays(X, Y, _load_result(ctx), ctx.gold("test"), ctx.pcfg, train_gold,
                                 n_pseudo=n_pseudo, calibration=None if calib.get("skipped") else calib)
        report.metadata["config_hash"] = run_hash(ctx.cfg)
        json_path, csv_path = ctx.out / "metrics.json", ctx.out / "metrics.csv"
        json_path.write_text(report.to_json(), encoding="utf-8")
        csv_path.write_text(CSV_HEADER + report.csv_row(run_hash(ctx.cfg)), encoding="utf-8")
        return [json_path, csv_path]

    ctx.run_stage("eval", inputs, run)


def cmd_pipeline(ctx: Context) -> None:
    for fn in (cmd_mine, cmd_train, cmd_calibrate, cmd_align):
        fn(ctx)
    if ctx.cfg.get("gold_dir"):
        cmd_eval(ctx)
    else:
        log.info("no gold_dir: skipping eval")


COMMANDS = {"synth": cmd_synth, "mine": cmd_mine, "train": cmd_train, "calibrate": cmd_calibrate,
            "align": cmd_align, "eval": cmd_eval, "pipeline": cmd_pipeline}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgalign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kgalign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (dotted, JSON value), repeatable")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", action="append", choices=MODES, help="repeatable; default ued")
        p.add_argument("--K", type=int, help="retention for the final alignment")
        p.add_argument("--epsilon", type=float)
        p.add_argument("--out", help="run directory")
        p.add_argument("--data", help="data directory laid out as written by `synth`")
        p.add_argument("--gold", help="gold label directory")
        p.add_argument("--resume", action="store_true", help="skip stages whose manifest is current")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _error(kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")
    return 2


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, overrides = resolve_config(args)
        validate_modes(cfg["modes"])
        ctx = Context(cfg, overrides, resume=args.resume)
        if ctx.supervised() and args.command in ("train", "calibrate", "eval", "pipeline") \
                and not cfg.get("gold_dir"):
            raise ConfigError(f"modes {sorted(ctx.pcfg.modes & set(NEEDS_TRAIN_GOLD))} need gold_dir")
        COMMANDS[args.command](ctx)
    except MissingArtifactError as exc:
        return _error("missing_artifact", str(exc), path=str(exc.path), producer=exc.producer)
    except (ConfigError, DataError, FileNotFoundError, ValueError) as exc:
        return _error(type(exc).__name__, str(exc))
    except RuntimeError as exc:  # divergence and similar
        return _error(type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
