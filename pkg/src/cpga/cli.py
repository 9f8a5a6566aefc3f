"""Command-line entry point: dataset build, train, eval, ablate, interpret and report."""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as dsmod
from . import interpret, models, optics, training
from .lattice import ConfigError, GeometryKind

log = logging.getLogger("cpga")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_TRAIN = training.TrainConfig()

# section -> key -> (parser, default); defaults mirror the module defaults
SCHEMA: dict[str, dict[str, tuple]] = {
    "lattice": {"grid_resolution": (int, 64), "domain_size": (float, 10.0)},
    "optics": {"preset": (str, "paper-3.2")},
    "dataset": {"out_px": (int, 32), "depth": (int, 32), "seed": (int, 0), "inhibition_low": (float, 0.02),
                "inhibition_high": (float, 2.0), "geometries": (str, "all"), "offsets_file": (str, "")},
    "training": {"epochs": (int, _TRAIN.epochs), "batch_size": (int, _TRAIN.batch_size),
                 "base_lr": (float, _TRAIN.base_lr), "lr_decay": (float, _TRAIN.lr_decay),
                 "lr_step": (int, _TRAIN.lr_step), "channels": (_ints, _TRAIN.channels),
                 "dropout": (float, _TRAIN.dropout), "scale_output": (_bool, _TRAIN.scale_output),
                 "seed": (int, _TRAIN.seed)},
    "interpret": {"patch": (int, 4), "stride": (int, 4), "fill": (float, 0.0),
                  "include_transformed": (_bool, False)},
}


@dataclass
class RunConfig:
    values: dict[str, dict]

    @classmethod
    def default(cls) -> "RunConfig":
        return cls({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse config: {e}") from None
        cfg = cls.default()
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in cp.items(section):
                cfg.set(section, key, raw)
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls.default()
        try:
            return cls.from_text(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None

    def set(self, section: str, key: str, raw) -> None:
        if key not in SCHEMA.get(section, {}):
            raise ConfigError(f"unknown config key {section}.{key}")
        parse = SCHEMA[section][key][0]
        try:
            self.values[section][key] = parse(raw) if isinstance(raw, str) else raw
        except ValueError as e:
            raise ConfigError(f"bad value for {section}.{key}: {e}") from None

    def get(self, section: str, key: str):
        return self.values[section][key]

    def canonical(self) -> dict:
        return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in kv.items()}
                for s, kv in self.values.items()}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode()).hexdigest()[:16]

    def to_text(self) -> str:
        lines = []
        for s, kv in self.canonical().items():
            lines.append(f"[{s}]")
            lines += [f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}" for k, v in kv.items()]
            lines.append("")
        return "\n".join(lines)


def _override(cfg: RunConfig, args, mapping: dict[str, tuple[str, str]]) -> None:
    for attr, (section, key) in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            cfg.set(section, key, v)


def _prov(cfg: RunConfig, seed: int) -> dict:
    return {"config_hash": cfg.hash(), "seed": int(seed), "version": __version__}


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _write_csv(path: Path, text: str, prov: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("# " + json.dumps(prov, sort_keys=True) + "\n" + text)


def _geometries(spec: str):
    if spec.strip().lower() == "all":
        return None
    return [GeometryKind.parse(g) for g in spec.split(",") if g.strip()]


def _settings(cfg: RunConfig) -> dsmod.BuildSettings:
    optics.preset(cfg.get("optics", "preset"))  # validate early
    return dsmod.BuildSettings(
        grid_resolution=cfg.get("lattice", "grid_resolution"), out_px=cfg.get("dataset", "out_px"),
        depth=cfg.get("dataset", "depth"), domain_size=cfg.get("lattice", "domain_size"),
        preset=cfg.get("optics", "preset"), seed=cfg.get("dataset", "seed"),
        inhibition_low=cfg.get("dataset", "inhibition_low"), inhibition_high=cfg.get("dataset", "inhibition_high"))


def _train_config(cfg: RunConfig, arch, seed=None) -> training.TrainConfig:
    t = cfg.values["training"]
    return training.TrainConfig(arch=arch, epochs=t["epochs"], batch_size=t["batch_size"], base_lr=t["base_lr"],
                                lr_decay=t["lr_decay"], lr_step=t["lr_step"],
                                seed=t["seed"] if seed is None else seed, channels=t["channels"],
                                dropout=t["dropout"], scale_output=t["scale_output"])


# ---------------------------------------------------------------- commands

def cmd_dataset(args) -> int:
    cfg = RunConfig.load(args.config)
    _override(cfg, args, {"res": ("lattice", "grid_resolution"), "px": ("dataset", "out_px"),
                          "depth": ("dataset", "depth"), "seed": ("dataset", "seed"),
                          "preset": ("optics", "preset"), "geometries": ("dataset", "geometries")})
    settings = _settings(cfg)
    geoms = _geometries(cfg.get("dataset", "geometries"))
    offsets_file = cfg.get("dataset", "offsets_file")
    offsets = dsmod.load_offsets(offsets_file) if offsets_file else None
    if args.dry_run:
        points = dsmod.build_design_grid(geoms, offsets=offsets, params=optics.preset(settings.preset))
        for p in points:
            print(p.id)
        print(f"{len(points)} planned records")
        return EXIT_OK
    if not args.out:
        raise ConfigError("--out is required unless --dry-run is given")
    out = Path(args.out)
    progress = (lambda k, n: log.info("record %d/%d", k, n)) if args.verbose else None
    ds = dsmod.build_dataset(out, settings, cfg.hash(), geometries=geoms, offsets=offsets, progress=progress)
    (out / "run.cfg").write_text(cfg.to_text())
    print(f"wrote {len(ds.ids)} records to {out} (train {len(ds.manifest.train)}, "
          f"val {len(ds.manifest.val)}, test {len(ds.manifest.test)})")
    return EXIT_OK


def _load_data(path) -> dsmod.Dataset:
    if not path:
        raise ConfigError("--data is required")
    return dsmod.load_dataset(path)


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    _override(cfg, args, {"epochs": ("training", "epochs"), "seed": ("training", "seed"),
                          "lr": ("training", "base_lr"), "channels": ("training", "channels")})
    ds = _load_data(args.data)
    tc = _train_config(cfg, args.arch)
    log_epoch = (lambda h: log.info("epoch %(epoch)d lr %(lr).2e train %(train_loss).5f val %(val_loss).5f", h)) \
        if args.verbose else None
    res = training.train(tc, ds, progress=log_epoch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = _prov(cfg, tc.seed)
    res.checkpoint.metadata.update(provenance=prov, dataset=ds.provenance, history=res.history)
    stem = f"{tc.arch.value}-s{tc.seed}"
    res.checkpoint.save(out / f"{stem}.ckpt")
    hist = "epoch,lr,train_loss,val_loss\n" + "".join(
        f"{h['epoch']},{h['lr']!r},{h['train_loss']!r},{h['val_loss']!r}\n" for h in res.history)
    _write_csv(out / f"{stem}-history.csv", hist, prov)
    _write_json(out / f"{stem}-val.json", {"provenance": prov, "best_epoch": res.best_epoch,
                                           **res.val.summary()})
    print(f"{stem}: best epoch {res.best_epoch}, val R2 {res.val.r2:.4f} -> {out / (stem + '.ckpt')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = models.Checkpoint.load(args.ckpt)
    ds = _load_data(args.data)
    rep = training.evaluate(ckpt, ds, args.split)
    prov = ckpt.metadata.get("provenance") or {"config_hash": ckpt.metadata.get("config_hash", ""),
                                               "seed": ckpt.metadata.get("seed", 0), "version": __version__}
    payload = {"provenance": prov, "arch": ckpt.spec.arch.value, "split": args.split, **rep.to_json()}
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(f".{args.split}.json")
    _write_json(out, payload)
    print(json.dumps({"arch": ckpt.spec.arch.value, "split": args.split, **rep.summary()}, sort_keys=True))
    return EXIT_OK


def _arch_list(text: str) -> list[models.ArchKind]:
    if text.strip().lower() == "all":
        return list(models.ArchKind)
    return [models.ArchKind.parse(a) for a in text.split(",") if a.strip()]


def cmd_ablate(args) -> int:
    cfg = RunConfig.load(args.config)
    _override(cfg, args, {"epochs": ("training", "epochs"), "seed": ("training", "seed"),
                          "channels": ("training", "channels")})
    ds = _load_data(args.data)
    first = cfg.get("training", "seed")
    seeds = list(range(first, first + args.seeds))
    archs = _arch_list(args.archs)
    done = (lambda row, secs: log.info("%s seed %d: R2 %.4f (%.0f s)", row["arch"], row["seed"], row["r2"], secs)) \
        if args.verbose else None
    table = training.ablate(ds, archs, seeds, _train_config(cfg, archs[0], first), args.split, progress=done)
    prov = _prov(cfg, first)
    out = Path(args.out)
    _write_json(out / "ablation.json", {**table.to_json(), "provenance": {**table.provenance, **prov}})
    _write_csv(out / "ablation.csv", table.to_csv(), prov)
    print(table.to_csv(), end="")
    return EXIT_OK


def _sample(ds: dsmod.Dataset, args) -> tuple[str, tuple]:
    if args.sample:
        i = int(ds.index([args.sample])[0])
    else:
        ids = ds.manifest.of(args.split)
        if not 0 <= args.index < len(ids):
            raise ConfigError(f"--index must lie in 0..{len(ids) - 1}")
        i = int(ds.index([ids[args.index]])[0])
    z = ds.standardized()[i].astype(np.float32)
    return ds.ids[i], (z, ds.original[i], ds.transformed[i])


def cmd_interpret(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out)
    if args.method == "errmap":
        ev = json.loads(Path(args.eval).read_text())
        rep = training.MetricsReport.from_json(ev)
        ds = _load_data(args.data)
        pairs = [tuple(p.split(",")) for p in args.pair] if args.pair else interpret.DEFAULT_PAIRS
        prov = ev.get("provenance", _prov(cfg, 0))
        for em in interpret.error_maps(rep, ds, pairs):
            _write_csv(out / f"errmap-{em.feature_a}-{em.feature_b}.csv", em.to_csv(), prov)
        print(f"wrote {len(pairs)} error maps to {out}")
        return EXIT_OK

    ckpt = models.Checkpoint.load(args.ckpt)
    ds = _load_data(args.data)
    prov = ckpt.metadata.get("provenance") or _prov(cfg, ckpt.metadata.get("seed", 0))
    if args.method == "gamma":
        rep = interpret.gamma_analysis(ckpt, training.to_tensors(ds, args.split))
        _write_json(out / f"gamma-{ckpt.spec.arch.value}.json", {"provenance": prov, **rep.to_json()})
        print(json.dumps(rep.correlations, sort_keys=True))
        return EXIT_OK

    sid, (num, orig, conv) = _sample(ds, args)
    png = out / "png" if args.png else None
    if args.method == "saliency":
        include = args.include_transformed or cfg.get("interpret", "include_transformed")
        sal = interpret.saliency(ckpt, num, orig, conv, sid, include_transformed=include)
        sal.save(out / f"saliency-{sid}.f32", png)
        _write_json(out / f"saliency-{sid}.json", {"provenance": prov, "sample_id": sid, "arch": sal.arch,
                                                   "raw_max": sal.raw_max, "normalized": sal.normalized})
        print(f"saliency for {sid}: raw max {sal.raw_max:.3e}")
        return EXIT_OK
    _override(cfg, args, {"patch": ("interpret", "patch"), "stride": ("interpret", "stride"),
                          "fill": ("interpret", "fill")})
    layers = list(_ints(args.layers)) if args.layers else None
    occ = interpret.occlusion_map(ckpt, num, orig, conv, cfg.get("interpret", "patch"),
                                  cfg.get("interpret", "stride"), cfg.get("interpret", "fill"), layers, sid)
    occ.save(out / f"occlusion-{sid}.f32", png)
    contrast = interpret.solid_void_contrast(occ, orig)
    _write_json(out / f"occlusion-{sid}.json", {"provenance": prov, "sample_id": sid, "patch": occ.patch,
                                                "stride": occ.stride, "fill": occ.fill, "layers": occ.layers,
                                                "base_prediction": occ.base_prediction,
                                                "solid_void_contrast": contrast})
    print(f"occlusion for {sid}: solid/void contrast {contrast:.3f}")
    return EXIT_OK


def _read_artifact(path: Path) -> tuple[dict, object]:
    text = path.read_text()
    if path.suffix == ".json":
        payload = json.loads(text)
        return payload.get("provenance", {}), payload
    first, _, body = text.partition("\n")
    prov = json.loads(first[1:]) if first.startswith("#") else {}
    return prov, body


def cmd_report(args) -> int:
    paths = []
    for p in args.inputs:
        p = Path(p)
        paths += sorted(x for x in p.rglob("*") if x.suffix in (".json", ".csv")) if p.is_dir() else [p]
    paths = [p for p in paths if p.name not in ("report.json",)]
    if not paths:
        raise dsmod.DataError("no artifacts found for the report")
    loaded = {}
    hashes = {}
    for p in paths:
        prov, payload = _read_artifact(p)
        if "config_hash" not in prov:
            raise dsmod.DataError(f"{p} carries no provenance")
        hashes.setdefault(prov["config_hash"], []).append(str(p))
        loaded[p] = payload
    if len(hashes) > 1:
        detail = "; ".join(f"{h}: {len(v)} file(s), e.g. {v[0]}" for h, v in sorted(hashes.items()))
        raise dsmod.DataError(f"refusing to mix artifacts with different config hashes ({detail})")
    report = {"provenance": {"config_hash": next(iter(hashes)), "version": __version__},
              "ablation": None, "evaluations": [], "error_maps": [], "gamma": []}
    for p, payload in loaded.items():
        if p.name == "ablation.json":
            report["ablation"] = payload["summary"]
        elif p.name.startswith("errmap-"):
            report["error_maps"].append(str(p))
        elif p.name.startswith("gamma-"):
            report["gamma"].append({"arch": payload["arch"], "correlations": payload["correlations"],
                                    "constant_gamma": payload["constant_gamma"]})
        elif isinstance(payload, dict) and "pcc" in payload and "arch" in payload:
            report["evaluations"].append({"file": str(p), "arch": payload["arch"],
                                          **{k: payload[k] for k in ("pcc", "r2", "mae", "rmse")}})
    out = Path(args.out)
    _write_json(out, report)
    if report["ablation"]:
        print(f"{'arch':<18} {'PCC':>8} {'R2':>8} {'MAE':>8} {'RMSE':>8}")
        for r in report["ablation"]:
            print(f"{r['arch']:<18} {r['pcc']:8.4f} {r['r2']:8.4f} {r['mae']:8.4f} {r['rmse']:8.4f}")
    print(f"report written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cpga", description=__doc__)
    ap.add_argument("--version", action="version", version=f"cpga {__version__}")
    ap.add_argument("--describe", metavar="ARCH", help="print the layer-by-layer shape table of an architecture")
    ap.add_argument("--channels", type=_ints, help="CNN widths for --describe, e.g. 32,64,128,256")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command")

    def common(p, data=True):
        p.add_argument("--config", help="INI run config; flags override it")
        if data:
            p.add_argument("--data", help="dataset directory")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("dataset", help="build the lattice/stack/target dataset")
    common(p, data=False)
    p.add_argument("action", nargs="?", choices=["build"], default="build")
    p.add_argument("--out")
    p.add_argument("--res", type=int, help="lattice voxels per edge")
    p.add_argument("--px", type=int, help="stack pixels per layer edge")
    p.add_argument("--depth", type=int, help="stack layers after resampling")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", help=f"optics preset: {', '.join(sorted(optics.PRESETS))}")
    p.add_argument("--geometries", help="comma list or 'all'")
    p.add_argument("--dry-run", action="store_true", help="list the planned records only")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train one architecture")
    common(p)
    p.add_argument("--arch", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--channels")
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train archs x seeds and tabulate test metrics")
    common(p)
    p.add_argument("--archs", default="all")
    p.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
    p.add_argument("--seed", type=int, help="first seed")
    p.add_argument("--epochs", type=int)
    p.add_argument("--channels")
    p.add_argument("--split", default="test", choices=("val", "test"))
    p.add_argument("--out", default="ablation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("interpret", help="saliency, occlusion, error maps or gamma analysis")
    common(p)
    p.add_argument("method", choices=("saliency", "occlusion", "errmap", "gamma"))
    p.add_argument("--ckpt")
    p.add_argument("--eval", help="evaluation JSON (errmap)")
    p.add_argument("--pair", action="append", help="feature pair a,b (errmap; repeatable)")
    p.add_argument("--sample", help="record id")
    p.add_argument("--index", type=int, default=0, help="position within --split when --sample is absent")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--patch", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--fill", type=float)
    p.add_argument("--layers", help="comma list of layer indices (occlusion)")
    p.add_argument("--include-transformed", action="store_true")
    p.add_argument("--png", action="store_true", help="also render PNG slices")
    p.add_argument("--out", default="interpret")
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("report", help="assemble one report from prior outputs")
    p.add_argument("inputs", nargs="+", help="artifact files or directories")
    p.add_argument("--out", default="report.json")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.describe:
            spec = models.ModelSpec(args.describe, args.channels or models.PAPER_CHANNELS)
            print(models.describe(spec))
            return EXIT_OK
        if not getattr(args, "func", None):
            ap.print_help()
            return EXIT_CONFIG
        if args.command == "interpret" and args.method != "errmap" and not args.ckpt:
            raise ConfigError(f"interpret {args.method} needs --ckpt")
        if args.command == "interpret" and args.method == "errmap" and not args.eval:
            raise ConfigError("interpret errmap needs --eval")
        return args.func(args)
    except ConfigError as e:
        print(f"cpga: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (dsmod.DataError, FileNotFoundError) as e:
        print(f"cpga: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except training.NumericError as e:
        print(f"cpga: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
