"""Command-line entry points tying the pipeline into reproducible runs.

Every command takes --config/--out/--seed plus targeted flags and
dotted-path --set overrides, writes its artifacts under the output
directory as new files, stores the exact config it used (hash-checked),
and exits nonzero with a machine-readable error record on failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import conditional as cond
from . import config as cfgmod
from . import dataio
from . import diffusion as df
from . import distill as dst
from . import metrics as M
from . import pde, residuals
from . import tensor as T
from .rng import SeedKey, derive_seed, standard_normal


class DependencyError(RuntimeError):
    def __init__(self, path):
        super().__init__(f"missing prerequisite artifact: {path}")
        self.path = str(path)


class ArtifactExists(RuntimeError):
    def __init__(self, path):
        super().__init__(f"refusing to overwrite existing artifact: {path}")
        self.path = str(path)


def _require(path: Path) -> Path:
    if not path.exists():
        raise DependencyError(path)
    return path


def _fresh(path: Path) -> Path:
    if path.exists():
        raise ArtifactExists(path)
    return path


def _outdir(cfg, args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    text = json.dumps(cfg, indent=2, sort_keys=True) + "\n"
    if cfg_path.exists():
        if cfg_path.read_text() != text:
            raise T.ContractViolation(
                f"{cfg_path} holds a different config (hash "
                f"{cfgmod.config_hash(json.loads(cfg_path.read_text()))} vs "
                f"{cfgmod.config_hash(cfg)}); use a fresh --out")
    else:
        cfg_path.write_text(text)
    return out


def _pde_config(cfg) -> pde.PdeConfig:
    kind = cfg["benchmark"]
    size = cfg["size"] or None
    return pde.default_config(kind, size=size, tol=cfg["data"]["tol"])


def _jsonl(path: Path):
    f = open(path, "w")

    def write(rec):
        f.write(json.dumps(rec) + "\n")
        f.flush()
    return write, f


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg, args):
    out = _outdir(cfg, args)
    pcfg = _pde_config(cfg)
    root = SeedKey(cfg["seed"], f"data/{pcfg.kind}")
    for split, n in (("train", cfg["data"]["n_train"]), ("test", cfg["data"]["n_test"])):
        path = _fresh(out / f"{split}.bin")
        data = pde.generate_dataset(pcfg, root.child(split), n)
        dataio.write_dataset(dataio.Dataset(pcfg.kind, data, cfg["seed"]), path)
        print(f"wrote {path} ({n} samples, kind={pcfg.kind}, grid={pcfg.grid})")
    return 0


def _load_teacher(out: Path):
    params, meta = T.load_params(_require(out / "teacher.ckpt"))
    net_cfg = df.NetConfig(channels=meta["channels"], widths=tuple(meta["widths"]))
    return df.DenoiserNet(net_cfg, params, meta["sigma_data"]), meta


def _load_student(out: Path, cfg):
    params, meta = T.load_params(_require(out / "student.ckpt"))
    net_cfg = df.NetConfig(channels=meta["channels"], widths=tuple(meta["widths"]))
    net = df.DenoiserNet(net_cfg, params, meta["sigma_data"])
    dcfg = dst.DistillConfig(**{**cfg["distill"],
                                "delta_k": tuple(cfg["distill"]["delta_k"]),
                                "sigma_init": meta["sigma_init"],
                                "k_max": meta["k_max"],
                                "method": meta["method"]})
    return dst.StudentGenerator(net, dcfg, tuple(meta["grid"]), kind=meta["kind"]), meta


def cmd_train_teacher(cfg, args):
    out = _outdir(cfg, args)
    train = dataio.read_dataset(_require(out / "train.bin"))
    tc = cfg["teacher"]
    tcfg = df.TrainConfig(batch=tc["batch"], lr=tc["lr"], steps=tc["steps"],
                          p_mean=tc["p_mean"], p_std=tc["p_std"], ema=tc["ema"],
                          optimizer=tc["optimizer"], widths=tuple(tc["widths"]),
                          seed=cfg["seed"])
    path = _fresh(out / "teacher.ckpt")
    log, f = _jsonl(_fresh(out / "teacher_log.jsonl"))
    net = df.train_teacher(train.data, tcfg, log=log)
    f.close()
    meta = {"kind": train.kind, "channels": train.channels,
            "widths": list(net.cfg.widths), "sigma_data": net.sigma_data,
            "grid": list(train.grid), "config_hash": cfgmod.config_hash(cfg)}
    T.save_params(net.params, path, meta=meta)
    print(f"wrote {path} (sigma_data={net.sigma_data:.4g})")
    return 0


def cmd_distill(cfg, args):
    out = _outdir(cfg, args)
    teacher, meta = _load_teacher(out)
    pcfg = _pde_config(cfg)
    op = residuals.for_config(pcfg)
    dc = dict(cfg["distill"])
    dc["delta_k"] = tuple(dc["delta_k"])
    dcfg = dst.DistillConfig(seed=cfg["seed"], **dc)
    s_path = _fresh(out / "student.ckpt")
    a_path = _fresh(out / "aux.ckpt")
    log, f = _jsonl(_fresh(out / "distill_log.jsonl"))
    result = dst.distill(teacher, op, dcfg, log_fn=log)
    f.close()
    smeta = dict(meta, sigma_init=dcfg.sigma_init, k_max=dcfg.k_max,
                 method=dcfg.method, config_hash=cfgmod.config_hash(cfg))
    T.save_params(result.student.net.params, s_path, meta=smeta)
    T.save_params(result.aux.params, a_path, meta=smeta)
    print(f"wrote {s_path} and {a_path} ({dcfg.steps} steps)")
    return 0


def cmd_sample(cfg, args):
    out = _outdir(cfg, args)
    pcfg = _pde_config(cfg)
    op = residuals.for_config(pcfg)
    n = cfg["eval"]["n_samples"]
    method = cfg["eval"]["method"]
    key = SeedKey(cfg["seed"], "sample")
    if args.model == "student":
        gen, meta = _load_student(out, cfg)
        k = args.steps or 1
        z = gen.sigma_init * standard_normal(derive_seed(key), (n,) + gen.field_shape)
        fields = _batched(lambda zz: gen.generate_np(zz, k), z, cfg["eval"]["eval_batch"])
        label = f"student-k{k}"
    else:
        teacher, meta = _load_teacher(out)
        steps = args.steps or 4
        ev = cfg["eval"]
        sch = df.sigma_schedule(steps, ev["sigma_min"], ev["sigma_max"], ev["rho"])
        shape = (n, meta["channels"]) + tuple(meta["grid"])
        z = sch.levels[0] * standard_normal(derive_seed(key), shape)
        if args.baseline == "guided":
            fields = _batched(lambda zz: df.guided_sample(
                teacher, sch, zz, op, cfg["eval"]["gamma"],
                cfg["eval"]["active_fraction"], method=method), z,
                cfg["eval"]["eval_batch"])
            label = f"teacher-guided-{steps}"
        else:
            fields = _batched(lambda zz: df.sample(teacher, sch, zz, method=method),
                              z, cfg["eval"]["eval_batch"])
            label = f"teacher-{steps}"
    path = _fresh(out / f"samples_{label}.bin")
    dataio.write_dataset(dataio.Dataset(pcfg.kind, fields, cfg["seed"]), path)
    rms = residuals.rms_pde_error(op, fields)
    print(f"wrote {path} rms_pde_error={rms:.4g}")
    return 0


def _batched(fn, z, batch):
    outs = [fn(z[i:i + batch]) for i in range(0, z.shape[0], batch)]
    return np.concatenate(outs)


def _median_latency_ms(gen_one, n_reps: int) -> float:
    times = []
    for _ in range(n_reps):
        t0 = time.perf_counter()
        gen_one()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def cmd_eval(cfg, args):
    out = _outdir(cfg, args)
    pcfg = _pde_config(cfg)
    op = residuals.for_config(pcfg)
    test = dataio.read_dataset(_require(out / "test.bin"))
    gen, meta = _load_student(out, cfg)
    teacher, _ = _load_teacher(out)
    ev = cfg["eval"]
    n = ev["n_samples"]
    stats = M.ChannelStats.from_real(test.data, eps=cfg["metrics"]["eps"])
    real_cloud = M.standardize(test.data, stats)
    proj_key = SeedKey(cfg["seed"], "metrics/proj")
    z_key = SeedKey(cfg["seed"], "eval")

    rows = []

    def add_row(label_method, steps, fields, gen_one):
        cloud = M.standardize(fields, stats)
        rows.append({
            "method": label_method,
            "steps": steps,
            "rms_pde_error": residuals.rms_pde_error(op, fields),
            "swd": M.swd(cloud, real_cloud, K=cfg["metrics"]["projections"],
                         key=proj_key),
            "sqrt_mmd2": M.mmd(cloud, real_cloud, bandwidths="auto",
                               real=real_cloud, subset=cfg["metrics"]["mmd_subset"]),
            "latency_ms": _median_latency_ms(gen_one, ev["latency_samples"]),
        })

    shape = (n,) + gen.field_shape
    for k in range(1, gen.k_max + 1):
        z = gen.sigma_init * standard_normal(derive_seed(z_key.child(f"student{k}")), shape)
        fields = _batched(lambda zz: gen.generate_np(zz, k), z, ev["eval_batch"])
        z1 = z[:1]
        add_row("student", k, fields, lambda: gen.generate_np(z1, k))

    for steps in ev["teacher_steps"]:
        sch = df.sigma_schedule(steps, ev["sigma_min"], ev["sigma_max"], ev["rho"])
        z = sch.levels[0] * standard_normal(derive_seed(z_key.child(f"teacher{steps}")),
                                            shape)
        if ev["baseline"] == "guided":
            sample_fn = lambda zz: df.guided_sample(teacher, sch, zz, op, ev["gamma"],
                                                    ev["active_fraction"],
                                                    method=ev["method"])
            label = "teacher-guided"
        else:
            sample_fn = lambda zz: df.sample(teacher, sch, zz, method=ev["method"])
            label = "teacher"
        fields = _batched(sample_fn, z, ev["eval_batch"])
        z1 = z[:1]
        add_row(label, steps, fields, lambda: sample_fn(z1))

    path = _fresh(out / "eval.json")
    payload = {
        "config_hash": cfgmod.config_hash(cfg),
        "schedule": {"sigma_min": ev["sigma_min"], "sigma_max": ev["sigma_max"],
                     "rho": ev["rho"], "method": ev["method"],
                     "sigma_init": gen.sigma_init, "k_max": gen.k_max},
        "eval_config": ev,
        "rows": rows,
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def cmd_cond_train(cfg, args):
    out = _outdir(cfg, args)
    train = dataio.read_dataset(_require(out / "train.bin"))
    gen, meta = _load_student(out, cfg)
    pcfg = _pde_config(cfg)
    op = residuals.for_config(pcfg)
    cc = cfg["conditional"]
    pairs = train.data[:cc["n_pairs"]]
    c, targets = cond.build_conditions(cc["task"], pairs,
                                       SeedKey(cfg["seed"], "cond/obs"),
                                       cc["obs_fraction"],
                                       burgers=(train.kind == "burgers"))
    tcfg = df.TrainConfig(batch=cc["batch"], lr=cc["lr"], steps=cc["steps"],
                          optimizer=cc["optimizer"], seed=cfg["seed"])
    path = _fresh(out / f"branch_{cc['task']}.ckpt")
    log, f = _jsonl(_fresh(out / f"cond_{cc['task']}_log.jsonl"))
    branch = cond.train_conditional(gen, op, c, targets, cc["lambda_phys"], tcfg,
                                    log_fn=log)
    f.close()
    meta_b = {"task": cc["task"], "cond_channels": branch.cond_ch,
              "kind": train.kind, "config_hash": cfgmod.config_hash(cfg)}
    T.save_params(branch.params, path, meta=meta_b)
    print(f"wrote {path}")
    return 0


def cmd_cond_eval(cfg, args):
    out = _outdir(cfg, args)
    test = dataio.read_dataset(_require(out / "test.bin"))
    gen, _ = _load_student(out, cfg)
    pcfg = _pde_config(cfg)
    op = residuals.for_config(pcfg)
    cc = cfg["conditional"]
    params, meta_b = T.load_params(_require(out / f"branch_{cc['task']}.ckpt"))
    branch = cond.ControlBranch(params, meta_b["cond_channels"], meta_b["task"])
    pairs = test.data[:cc["n_eval"]]
    c, targets = cond.build_conditions(cc["task"], pairs,
                                       SeedKey(cfg["seed"], "cond/obs-eval"),
                                       cc["obs_fraction"],
                                       burgers=(test.kind == "burgers"))
    z = gen.sigma_init * standard_normal(derive_seed(SeedKey(cfg["seed"], "cond/z")),
                                         targets.shape)
    preds = np.concatenate([
        cond.conditional_generate(gen, branch, c.y[i:i + 32], z[i:i + 32])
        for i in range(0, len(targets), 32)])
    sl = cond.task_channels(cc["task"], targets.shape[1])
    rel = cond.relative_l2(preds, targets, sl)
    row = {"task": cc["task"], "rel_error": rel,
           "rms_pde_error": residuals.rms_pde_error(op, preds), "steps": 1}
    if test.kind == "darcy" and cc["task"] == "inverse":
        row["abs_error"] = cond.darcy_class_error(preds[:, 0], targets[:, 0])
    path = _fresh(out / f"cond_eval_{cc['task']}.json")
    path.write_text(json.dumps(row, indent=2) + "\n")
    csv_path = out / "cond_eval.csv"
    new = not csv_path.exists()
    with open(csv_path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(["task", "rel_or_abs_error", "rms_pde_error", "steps"])
        w.writerow([row["task"], row.get("abs_error", row["rel_error"]),
                    row["rms_pde_error"], row["steps"]])
    print(f"wrote {path}")
    return 0


def cmd_report(cfg, args):
    out = Path(args.out)
    eval_path = out / "eval.json"
    if not eval_path.exists():
        raise DependencyError(eval_path)
    payload = json.loads(eval_path.read_text())
    rows = sorted(payload["rows"], key=lambda r: (r["method"], r["steps"]))
    csv_path = _fresh(out / "report.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "steps", "rms_pde_error", "swd", "sqrt_mmd2",
                    "latency_ms"])
        for r in rows:
            w.writerow([r["method"], r["steps"], r["rms_pde_error"], r["swd"],
                        r["sqrt_mmd2"], r["latency_ms"]])
    student_rows = sorted((r for r in rows if r["method"] == "student"),
                          key=lambda r: r["steps"])
    teacher_refs = {str(r["steps"]): r["rms_pde_error"] for r in rows
                    if r["method"].startswith("teacher")}
    summary = {
        "run_id": out.name,
        "config_hash": payload["config_hash"],
        "rows": rows,
        "student_pde_error_by_k": [r["rms_pde_error"] for r in student_rows],
        "teacher_refs": teacher_refs,
    }
    json_path = _fresh(out / "report.json")
    json_path.write_text(json.dumps(summary, indent=2) + "\n")
    print(f"wrote {csv_path} and {json_path}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "cond-train": cmd_cond_train,
    "cond-eval": cmd_cond_eval,
    "report": cmd_report,
}

_FLAG_PATHS = {
    "benchmark": "benchmark",
    "seed": "seed",
    "lambda_phys": "distill.lambda_phys",
    "sigma_init": "distill.sigma_init",
    "k_max": "distill.k_max",
    "guidance_start": "distill.guidance_start",
    "method": "distill.method",
    "baseline": "eval.baseline",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdegen",
                                description="physics-guided diffusion distillation "
                                            "for PDE fields")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", default="runs/run", help="run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--benchmark", default=None, choices=pde.KINDS)
    p.add_argument("--steps", type=int, default=None,
                   help="training steps (train commands) or sampler steps (sample)")
    p.add_argument("--lambda-phys", dest="lambda_phys", type=float, default=None)
    p.add_argument("--sigma-init", dest="sigma_init", type=float, default=None)
    p.add_argument("--k-max", dest="k_max", type=int, default=None)
    p.add_argument("--guidance-start", dest="guidance_start", type=int, default=None)
    p.add_argument("--method", choices=["euler", "heun"], default=None)
    p.add_argument("--baseline", choices=["plain", "guided"], default=None)
    p.add_argument("--model", choices=["student", "teacher"], default="student",
                   help="which checkpoint the sample command draws from")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY.PATH=VALUE", help="dotted-path config override")
    return p


def _config_from_args(args) -> dict:
    config_path = args.config
    if config_path is None:
        stored = Path(args.out) / "config.json"
        if stored.exists():
            config_path = stored  # pipeline commands inherit the run's config
    cfg = cfgmod.load_config(config_path, args.overrides)
    for flag, path in _FLAG_PATHS.items():
        val = getattr(args, flag)
        if val is not None:
            cfg = cfgmod.apply_override(cfg, f"{path}={json.dumps(val)}")
    if args.steps is not None and args.command in ("train-teacher", "distill",
                                                   "cond-train"):
        section = {"train-teacher": "teacher", "distill": "distill",
                   "cond-train": "conditional"}[args.command]
        cfg = cfgmod.apply_override(cfg, f"{section}.steps={args.steps}")
    if args.method is not None:
        cfg = cfgmod.apply_override(cfg, f"eval.method={json.dumps(args.method)}")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except DependencyError as e:
        _emit_error("dependency", str(e), path=e.path)
        return 2
    except ArtifactExists as e:
        _emit_error("artifact-exists", str(e), path=e.path)
        return 3
    except (T.ContractViolation, dataio.FormatError) as e:
        _emit_error("contract", str(e))
        return 4
    except (df.TrainingFailure, pde.SolverFailure) as e:
        _emit_error("training", str(e))
        return 5


def _emit_error(kind, message, **extra):
    rec = {"error": kind, "message": message}
    rec.update(extra)
    print(json.dumps(rec), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
