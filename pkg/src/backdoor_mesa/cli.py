"""Command-line driver.

Every subcommand works inside ``<out>/<config-hash>/``. The effective config
is written there as ``config.json`` and each artifact records the hash that
produced it, so stages run with a different config refuse to reuse it.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint, pipeline
from .config import RunConfig
from .defense import DefenseReport, DefenseRow
from .mesa import EmptyDistributionError, load_ensemble, save_ensemble
from .numeric import ContractError, pca_project

OUT_ENV = "BACKDOOR_MESA_OUT"
log = logging.getLogger("backdoor_mesa")


class MissingArtifactError(ContractError):
    """A prerequisite stage has not been run for this configuration."""


class ConfigMismatchError(ContractError):
    """An artifact was produced under a different configuration."""


class RunDir:
    def __init__(self, root, cfg: RunConfig):
        self.cfg = cfg
        self.hash = cfg.hash()
        self.path = Path(root) / self.hash
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "config.json").write_text(cfg.dumps(), encoding="utf-8")

    def file(self, *parts) -> Path:
        p = self.path.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, rel: str, stage: str) -> Path:
        p = self.path / rel
        if not p.exists():
            raise MissingArtifactError(f"missing prerequisite artifact {rel} in {self.path}; run `{stage}` first")
        return p

    def write_json(self, rel: str, doc: dict) -> Path:
        doc = {"config_hash": self.hash, **doc}
        p = self.file(rel)
        p.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return p

    def read_json(self, rel: str, stage: str) -> dict:
        doc = json.loads(self.need(rel, stage).read_text(encoding="utf-8"))
        self.check(doc.get("config_hash"), rel)
        return doc

    def check(self, found: Optional[str], rel: str) -> None:
        if found != self.hash:
            raise ConfigMismatchError(f"{rel} was produced by config {found}, current config is {self.hash}")

    # typed artifacts -------------------------------------------------- #
    def save_net(self, rel: str, net) -> None:
        checkpoint.save_network(self.file(rel), net, meta={"config_hash": self.hash})

    def load_net(self, rel: str, stage: str):
        net, meta = checkpoint.load_network(self.need(rel, stage), with_meta=True)
        self.check(meta.get("config_hash"), rel)
        return net

    def data(self):
        p = self.need("data.bin", "gen-data")
        train, test, meta = checkpoint.load_dataset(p, with_meta=True)
        self.check(meta.get("config_hash"), "data.bin")
        defense, evalset = pipeline.defender_split(self.cfg, test)
        return train, test, defense, evalset

    def catalog(self):
        doc = self.read_json("catalog.json", "gen-data")
        return checkpoint.catalog_from_doc(doc)

    def report(self, rel: str) -> DefenseReport:
        return DefenseReport.read_csv(self.path / rel) if (self.path / rel).exists() else DefenseReport()


def write_rows(rd: RunDir, rel: str, rows: List[DefenseRow], replace_triggers: Sequence[str]) -> DefenseReport:
    """Merge rows into a CSV (and JSON mirror), replacing earlier rows for the same triggers."""
    rep = rd.report(rel)
    rep.rows = [r for r in rep.rows if r.trigger not in set(replace_triggers)] + list(rows)
    rep.meta = {"config_hash": rd.hash}
    rep.write_csv(rd.file(rel))
    rep.write_json(rd.file(rel.replace(".csv", ".json")))
    return rep


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #

def cmd_gen_data(rd: RunDir, args) -> None:
    train, test = pipeline.make_data(rd.cfg)
    checkpoint.save_dataset(rd.file("data.bin"), train, test, meta={"config_hash": rd.hash})
    cat = pipeline.make_catalog(rd.cfg, train)
    rd.write_json("catalog.json", checkpoint.catalog_to_doc(cat))
    print(f"wrote {len(train)} train / {len(test)} test images and {len(cat)} triggers to {rd.path}")


def cmd_train_victim(rd: RunDir, args) -> None:
    train, test, _, _ = rd.data()
    model, rep = pipeline.fit_victim(rd.cfg, train, test)
    rd.save_net("victim.ckpt", model)
    rd.write_json("victim.json", {"clean_accuracy": rep.clean_accuracy, "losses": rep.losses, "warning": rep.warning})
    print(f"victim clean accuracy {rep.clean_accuracy:.4f}")


def _selected(rd: RunDir, args):
    cat = rd.catalog()
    if getattr(args, "trigger", None):
        cat = [e for e in cat if e.name in args.trigger]
        if not cat:
            raise KeyError(f"no catalog trigger named {args.trigger}")
    return cat


def _attack_task(payload):
    cfg_dict, root, name = payload
    rd = RunDir(root, RunConfig.from_dict(cfg_dict))
    train, test, _, _ = rd.data()
    victim = rd.load_net("victim.ckpt", "train-victim")
    entry = next(e for e in rd.catalog() if e.name == name)
    bd, rep = pipeline.attack(rd.cfg, victim, train, test, entry)
    rd.save_net(f"attack/{name}.ckpt", bd)
    return {"trigger": name, "asr": rep.asr, "clean_accuracy": rep.clean_accuracy, "poisoned": rep.poisoned,
            "seen": rep.seen}


def _map(fn, payloads, workers: int):
    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, payloads))
    return [fn(p) for p in payloads]


def cmd_attack(rd: RunDir, args) -> None:
    rd.need("victim.ckpt", "train-victim")
    victim_acc = rd.read_json("victim.json", "train-victim")["clean_accuracy"]
    names = [e.name for e in _selected(rd, args)]
    res = _map(_attack_task, [(rd.cfg.to_dict(), str(rd.path.parent), n) for n in names], args.workers)
    prev = {}
    if (rd.path / "attack.json").exists():
        prev = {r["trigger"]: r for r in rd.read_json("attack.json", "attack")["rows"]}
    prev.update({r["trigger"]: {**r, "victim_accuracy": victim_acc} for r in res})
    rows = [prev[k] for k in sorted(prev)]
    rd.write_json("attack.json", {"rows": rows})
    _write_csv(rd.file("attack.csv"), rows, ["trigger", "asr", "clean_accuracy", "victim_accuracy", "poisoned",
                                            "seen"], rd.hash)
    for r in res:
        print(f"{r['trigger']:>14}  ASR {r['asr']:.3f}  clean accuracy {r['clean_accuracy']:.4f}")


def _write_csv(path, rows: List[dict], cols: List[str], config_hash: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(cols + ["config_hash"]) + "\n")
        for r in rows:
            vals = [f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in cols]
            fh.write(",".join(vals + [config_hash]) + "\n")


def _attack_ctx(rd: RunDir, name: str):
    entry = next(e for e in rd.catalog() if e.name == name)
    model = rd.load_net(f"attack/{name}.ckpt", "attack")
    return entry, model, pipeline.attack_spec(rd.cfg, entry)


def _model_task(payload):
    cfg_dict, root, name, seed = payload
    rd = RunDir(root, RunConfig.from_dict(cfg_dict))
    _, _, defense, _ = rd.data()
    entry, model, spec = _attack_ctx(rd, name)
    try:
        ens = pipeline.model_triggers(rd.cfg, model, defense, spec.target, name, seed)
    except EmptyDistributionError as e:
        rd.write_json(f"ensembles/{name}/seed{seed}/empty.json", {"error": str(e)})
        return {"trigger": name, "seed": seed, "error": str(e)}
    stale = rd.path / f"ensembles/{name}/seed{seed}/empty.json"
    if stale.exists():
        stale.unlink()
    save_ensemble(ens, rd.file(f"ensembles/{name}/seed{seed}", "x").parent, rd.hash)
    return {"trigger": name, "seed": seed, "active": int(sum(s.active for s in ens.submodels)),
            "mean_F": [s.mean_F for s in ens.submodels], "gamma": ens.weights.tolist()}


def cmd_model_triggers(rd: RunDir, args) -> None:
    names = [e.name for e in _selected(rd, args)]
    for n in names:
        rd.need(f"attack/{n}.ckpt", "attack")
    seeds = list(rd.cfg.defense.seeds)
    res = _map(_model_task, [(rd.cfg.to_dict(), str(rd.path.parent), n, s) for n in names for s in seeds],
               args.workers)
    for r in res:
        if "error" in r:
            print(f"{r['trigger']:>14} seed {r['seed']}: {r['error']}")
        else:
            print(f"{r['trigger']:>14} seed {r['seed']}: mean F per threshold "
                  + " ".join(f"{v:.3f}" for v in r["mean_F"]))


def _detect_task(payload):
    cfg_dict, root, name = payload
    rd = RunDir(root, RunConfig.from_dict(cfg_dict))
    _, _, defense, _ = rd.data()
    if name == "clean":
        model = rd.load_net("victim.ckpt", "train-victim")
    else:
        _, model, _ = _attack_ctx(rd, name)
    rep = pipeline.detect(rd.cfg, model, defense, name)
    return {"model": name, "scores": rep.scores, "flagged": rep.flagged}


def cmd_detect(rd: RunDir, args) -> None:
    names = ["clean"] + [e.name for e in _selected(rd, args)]
    res = _map(_detect_task, [(rd.cfg.to_dict(), str(rd.path.parent), n) for n in names], args.workers)
    rows = []
    for r in res:
        for c, s in sorted(r["scores"].items()):
            rows.append({"model": r["model"], "class": c, "score": s, "flagged": int(c in r["flagged"])})
        print(f"{r['model']:>14}: flagged {r['flagged']}  scores "
              + " ".join(f"{s:.2f}" for _, s in sorted(r["scores"].items())))
    _write_csv(rd.file("detect.csv"), rows, ["model", "class", "score", "flagged"], rd.hash)


def _defend_task(payload):
    cfg_dict, root, name, seed, kind = payload
    rd = RunDir(root, RunConfig.from_dict(cfg_dict))
    _, _, defense, evalset = rd.data()
    entry, model, spec = _attack_ctx(rd, name)
    if kind == "ideal":
        return [pipeline.ideal(rd.cfg, model, spec, defense, evalset, seed)], None
    if kind == "baseline":
        rows, trigs = pipeline.baseline(rd.cfg, model, spec, defense, evalset, seed)
        return rows, [t.pixels.reshape(-1).tolist() for t in trigs]
    empty = rd.path / f"ensembles/{name}/seed{seed}/empty.json"
    if empty.exists():
        rd.read_json(str(empty.relative_to(rd.path)), "model-triggers")
        print(f"{name:>14} seed {seed}: no valid trigger distribution, nothing to retrain with")
        return [], None
    d = rd.need(f"ensembles/{name}/seed{seed}/manifest.json", "model-triggers").parent
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    rd.check(manifest.get("config_hash"), str(d.relative_to(rd.path)))
    return pipeline.defend(rd.cfg, model, load_ensemble(d), spec, defense, evalset, seed), None


def _run_defense_kind(rd: RunDir, args, kind: str, csv_name: str, seeds) -> DefenseReport:
    names = [e.name for e in _selected(rd, args)]
    res = _map(_defend_task, [(rd.cfg.to_dict(), str(rd.path.parent), n, s, kind) for n in names for s in seeds],
               args.workers)
    rows = [r for rs, _ in res for r in rs]
    if kind == "baseline":
        trig_doc = {}
        for (rs, trigs) in res:
            trig_doc[rs[0].trigger] = trigs
        prev = rd.read_json("baseline_triggers.json", "baseline")["triggers"] if (
            rd.path / "baseline_triggers.json").exists() else {}
        prev.update(trig_doc)
        rd.write_json("baseline_triggers.json", {"triggers": prev})
    rep = write_rows(rd, csv_name, rows, names)
    for r in rows:
        print(f"{r.trigger:>14} {r.variant:>12} seed {r.seed}: ASR {r.asr_before:.3f} -> {r.asr_after:.3f}, "
              f"clean accuracy {r.acc_before:.4f} -> {r.acc_after:.4f}")
    return rep


def cmd_defend(rd: RunDir, args) -> None:
    _run_defense_kind(rd, args, "ensemble", "defense.csv", rd.cfg.defense.seeds)


def cmd_ideal(rd: RunDir, args) -> None:
    _run_defense_kind(rd, args, "ideal", "ideal.csv", rd.cfg.defense.seeds)


def cmd_baseline(rd: RunDir, args) -> None:
    _run_defense_kind(rd, args, "baseline", "baseline.csv", rd.cfg.defense.seeds[:1])


def cmd_oracle(rd: RunDir, args) -> None:
    from .oracle import SyntheticProblem, oracle_config, run_oracle_mesa, write_oracle_csv, write_oracle_svg

    o = rd.cfg.oracle
    problem = SyntheticProblem.two_boxes(gap=o.gap)
    mcfg = oracle_config(alpha=o.alpha, epochs=o.epochs, steps_per_epoch=o.steps_per_epoch,
                         batch_size=o.batch_size, stats_steps=o.stats_steps, noise=o.noise)
    summary = []
    for s in range(o.seeds):
        res = run_oracle_mesa(problem, pipeline.stream(rd.cfg, "oracle", s), o.levels, mcfg, o.entropy, o.samples,
                              o.cells)
        write_oracle_csv(res, rd.file(f"oracle/levels_seed{s}.csv"))
        write_oracle_svg(res, rd.file(f"oracle/density_seed{s}.svg"))
        summary.append({"seed": s, "tv": res.tv, "min_box_mass": min(res.box_mass),
                        "failures": len(res.failures)})
        print(f"oracle seed {s}: TV {res.tv:.3f}, box masses " + " ".join(f"{m:.3f}" for m in res.box_mass))
    _write_csv(rd.file("oracle.csv"), summary, ["seed", "tv", "min_box_mass", "failures"], rd.hash)


def cmd_sweep(rd: RunDir, args) -> None:
    """Catalog x defense-variant matrix: every stage in order."""
    for fn in (cmd_gen_data, cmd_train_victim, cmd_attack, cmd_model_triggers, cmd_defend, cmd_ideal, cmd_baseline):
        fn(rd, args)
    cmd_report(rd, args)


def cmd_report(rd: RunDir, args) -> None:
    from .svg import bar_chart

    parts = [p for p in ("defense.csv", "ideal.csv", "baseline.csv") if (rd.path / p).exists()]
    if not parts:
        raise MissingArtifactError(f"nothing to report in {rd.path}: no defense, ideal or baseline results")
    rows: List[DefenseRow] = []
    for p in parts:
        rep = DefenseReport.read_csv(rd.path / p)
        for r in rep.rows:
            rd.check(r.config_hash, p)
        rows += rep.rows
    triggers = sorted({r.trigger for r in rows})

    def mean(variant_pred, t, field_name):
        vals = [getattr(r, field_name) for r in rows if r.trigger == t and variant_pred(r.variant)]
        return float(np.mean(vals)) if vals else float("nan")

    summary = []
    for t in triggers:
        betas = [r for r in rows if r.trigger == t and r.variant.startswith("beta=")]
        best = min(betas, key=lambda r: (r.asr_after, r.variant)).variant if betas else ""
        base = [r.asr_after for r in rows if r.trigger == t and r.variant.startswith("baseline#")]
        summary.append({
            "trigger": t,
            "asr_before": mean(lambda v: True, t, "asr_before"),
            "ensemble": mean(lambda v: v == "ensemble", t, "asr_after"),
            "best_beta": best,
            "ideal": mean(lambda v: v == "ideal", t, "asr_after"),
            "baseline_mean": float(np.mean(base)) if base else float("nan"),
            "baseline_min": float(np.min(base)) if base else float("nan"),
            "baseline_max": float(np.max(base)) if base else float("nan"),
        })
    cols = list(summary[0])
    _write_csv(rd.file("summary.csv"), summary, cols, rd.hash)
    series = {k: [s[k] if np.isfinite(s[k]) else 0.0 for s in summary]
              for k in ("asr_before", "ensemble", "ideal", "baseline_mean")}
    rd.file("asr_bars.svg").write_text(bar_chart(triggers, series, "original-trigger ASR before and after defense",
                                                 note=f"config {rd.hash}"), encoding="utf-8")
    _pca_figure(rd, triggers)
    print(f"report written to {rd.path} ({len(rows)} rows, {len(triggers)} triggers)")


def _pca_figure(rd: RunDir, triggers: Sequence[str], n: int = 2000) -> None:
    """Scatter of sampled triggers for the first trigger with a stored ensemble."""
    from .svg import scatter

    for t in triggers:
        d = rd.path / "ensembles" / t / "seed0"
        if not (d / "manifest.json").exists():
            continue
        ens = load_ensemble(d)
        rng = pipeline.stream(rd.cfg, "report", t).generator()
        x, idx = ens.sample(n, rng, return_index=True)
        entry = next(e for e in rd.catalog() if e.name == t)
        extra = [("original", entry.trigger.reshape(-1))]
        if (rd.path / "baseline_triggers.json").exists():
            base = rd.read_json("baseline_triggers.json", "baseline")["triggers"].get(t, [])
            extra += [(f"baseline #{i}", np.asarray(b)) for i, b in enumerate(base[:3])]
        coords, comps = pca_project(np.vstack([x] + [e for _, e in extra]), 2)
        rd.file(f"pca_{t}.svg").write_text(
            scatter(coords[:n], idx, [(name, coords[n + i]) for i, (name, _) in enumerate(extra)],
                    f"sampled triggers for {t} (PCA)", note=f"config {rd.hash}"), encoding="utf-8")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the dataset cache and trigger catalog"),
    "train-victim": (cmd_train_victim, "train the clean classifier"),
    "attack": (cmd_attack, "inject one backdoor per catalog trigger"),
    "model-triggers": (cmd_model_triggers, "fit the trigger-distribution ensembles"),
    "detect": (cmd_detect, "probe every class of the clean and backdoored models"),
    "defend": (cmd_defend, "retrain with sub-model and ensemble triggers"),
    "baseline": (cmd_baseline, "pixel-space single-trigger reversal and retraining"),
    "ideal": (cmd_ideal, "retrain with the original trigger"),
    "oracle": (cmd_oracle, "density reconstruction on the synthetic two-box problem"),
    "sweep": (cmd_sweep, "run every stage over the catalog"),
    "report": (cmd_report, "aggregate CSVs and draw SVG figures"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="backdoor-mesa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help=f"output root (default ${OUT_ENV} or ./runs)")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set attack.ratio=0.05 (value parsed as JSON)")
        p.add_argument("--trigger", action="append", help="restrict to the named catalog trigger(s)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over: Dict[str, object] = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ContractError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            over[key] = json.loads(raw)
        except json.JSONDecodeError:
            over[key] = raw
    if args.seed is not None:
        over["seed"] = args.seed
    return cfg.override(over) if over else cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        root = args.out or Path(os.environ.get(OUT_ENV, "runs"))
        rd = RunDir(root, cfg)
        COMMANDS[args.command][0](rd, args)
    except (ContractError, KeyError, EmptyDistributionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
