"""Stage orchestration: run directories, artifact hashing, no-op reruns.

Every command materializes its outputs under one run directory and records
a manifest entry keyed by the hash of (stage config, upstream artifact
hashes).  A stage reruns only when that key changes, when an output is
missing or tampered with, or when the caller forces it.  Training stages
persist their checkpoint and history after every epoch, so an interrupted
run resumes from the last finished epoch (with a fresh optimizer, as
documented on the train functions).

Layout under one run directory::

    config.json              resolved run configuration
    manifest.json            stage ledger (hashes, wall-clock times)
    data/{train,test}/       synthesized cubes
    ae/                      autoencoder checkpoint + history
    latents/train/           encoded train split
    gan/{latent,full}/       generator checkpoints + histories
    samples/{ld-gan,s-gan}/  generated cube pools
    task/<task>/             recovery checkpoint, history, report
    evaluate/<task>/         per-cube test metrics
    analyze/                 endmember + pca summaries
    experiments/             suite result CSVs
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import shutil
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .analysis import match_endmembers, pca_report, psnr, psnr_csv_value, ssim, vca_endmembers
from .autoencoder import (
    AE_HISTORY_FIELDS,
    encode_dataset,
    load_autoencoder,
    save_autoencoder,
    train_ae,
)
from .checkpoints import read_history, write_history
from .config import OPERATOR_OF_TASK, TASK_KINDS, RunConfig
from .dataio import Dataset, assemble_augmented, geometric_pool, load_dataset, save_dataset, synth_dataset
from .errors import ConfigError, DependencyError
from .gan import GAN_HISTORY_FIELDS, load_gan, sample_full, sample_spectral, save_gan, train_gan
from .operators import make_operator
from .recovery import (
    REPORT_FIELDS,
    TASK_HISTORY_FIELDS,
    load_recovery,
    recover,
    save_recovery,
    train_task,
)

POOL_OF_TARGET = {"latent": "ld-gan", "full": "s-gan"}

SUITES = ("convergence", "da-sweep", "reg-sweep", "endmembers", "pca", "geo-compare")
DA_FRACTIONS = (0.2, 0.5, 1.0)
REG_GRID = (0.0, 1e-5, 1e-3)


# ---------------------------------------------------------------------------
# hashing and the manifest

def hash_path(path) -> str:
    """Content hash of a file, or of a directory's files (order-free)."""
    p = Path(path)
    h = hashlib.sha256()
    if p.is_file():
        h.update(p.read_bytes())
        return h.hexdigest()
    for f in sorted(p.rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(p)).encode())
            h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


class RunManifest:
    """Stage ledger for one run directory."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / "manifest.json"
        self.stages = {}
        if self.path.exists():
            try:
                self.stages = json.loads(self.path.read_text()).get("stages", {})
            except (json.JSONDecodeError, AttributeError):
                self.stages = {}  # corrupt ledger just means stages rerun

    def save(self):
        payload = {"version": 1, "stages": self.stages}
        self.path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


@dataclass
class StageResult:
    name: str
    ran: bool
    seconds: float
    outputs: dict


def _outputs_intact(entry, run_dir) -> bool:
    outputs = entry.get("outputs", {})
    if not outputs:
        return False
    for rel, digest in outputs.items():
        p = Path(run_dir) / rel
        if not p.exists() or hash_path(p) != digest:
            return False
    return True


def run_stage(run, manifest, name, key_obj, output_rels, build, force=False) -> StageResult:
    """Execute ``build`` unless the manifest proves the outputs are current."""
    key = _hash_obj(key_obj)
    entry = manifest.stages.get(name)
    if (not force and entry and entry.get("status") == "done"
            and entry.get("key") == key and _outputs_intact(entry, run)):
        return StageResult(name, False, float(entry.get("seconds", 0.0)), entry["outputs"])
    t0 = time.perf_counter()
    build()
    seconds = time.perf_counter() - t0
    outputs = {rel: hash_path(run / rel) for rel in output_rels}
    manifest.stages[name] = {
        "key": key,
        "status": "done",
        "outputs": outputs,
        "seconds": round(seconds, 3),
    }
    manifest.save()
    return StageResult(name, True, seconds, outputs)


def _train_stage(run, manifest, name, key_obj, epochs, out_rels, ckpt_rel, hist_rel,
                 fields, load_net, fresh, more, force, finish=None) -> StageResult:
    """Shared rerun/resume logic for the three training stages.

    ``fresh(on_epoch)`` trains from scratch; ``more(net, done, on_epoch)``
    continues a checkpoint that has ``done`` epochs behind it.  Both run
    under an ``on_epoch`` callback that persists checkpoint and history, so
    partial progress survives interruption.  ``finish(net, rows)`` writes
    any derived artifacts (e.g. the report row) after training.
    """
    key = _hash_obj(key_obj)
    resume_obj = copy.deepcopy(key_obj)
    resume_obj["config"].pop("epochs", None)
    resume_key = _hash_obj(resume_obj)

    entry = manifest.stages.get(name)
    if (not force and entry and entry.get("status") == "done"
            and entry.get("key") == key and _outputs_intact(entry, run)):
        return StageResult(name, False, float(entry.get("seconds", 0.0)), entry["outputs"])

    ckpt = run / ckpt_rel
    hist = run / hist_rel
    ckpt.parent.mkdir(parents=True, exist_ok=True)

    net = None
    rows = []
    if (not force and entry and entry.get("resume_key") == resume_key
            and ckpt.exists() and hist.exists()):
        old = read_history(hist)
        if 0 < len(old) < epochs:
            net = load_net(ckpt)
            rows = old
    prev_seconds = float(entry.get("seconds", 0.0)) if (entry and net is not None) else 0.0
    done = len(rows)

    manifest.stages[name] = {"resume_key": resume_key, "status": "running",
                             "seconds": prev_seconds}
    manifest.save()

    def persist(net_now, row):
        row = dict(row)
        row["epoch"] = int(row["epoch"]) + done
        rows.append(row)
        write_history(hist, rows, fields)

    t0 = time.perf_counter()
    if net is None:
        net = fresh(persist)
    else:
        net = more(net, done, persist)
    if finish is not None:
        finish(net, rows)
    seconds = prev_seconds + time.perf_counter() - t0

    outputs = {rel: hash_path(run / rel) for rel in out_rels}
    manifest.stages[name] = {
        "key": key,
        "resume_key": resume_key,
        "status": "done",
        "outputs": outputs,
        "seconds": round(seconds, 3),
    }
    manifest.save()
    return StageResult(name, True, seconds, outputs)


# ---------------------------------------------------------------------------
# shared plumbing

def prepare_run(cfg: RunConfig) -> Path:
    """Create the run directory and drop the resolved config into it."""
    run = Path(cfg.out)
    run.mkdir(parents=True, exist_ok=True)
    cfgmod.save_config(cfg, run / "config.json")
    return run


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _require(run, rel, stage, command) -> Path:
    p = run / rel
    if not p.exists():
        raise DependencyError(
            f"{command} needs outputs from '{stage}' (missing {p}); run '{stage}' first"
        )
    return p


def _operator_for(cfg: RunConfig, task: str):
    o = cfg.operator
    return make_operator(
        OPERATOR_OF_TASK[task], cfg.synth.m, cfg.synth.n, cfg.synth.l,
        seed=cfg.seed, transmittance=o.transmittance, k_s=o.k_s, k_l=o.k_l,
    )


def _pool_count(cfg: RunConfig, train_len: int) -> int:
    return cfg.sample_count if cfg.sample_count > 0 else train_len


def _load_splits(run):
    return load_dataset(run / "data", "train"), load_dataset(run / "data", "test")


def _task_cfg(cfg: RunConfig, task: str, **changes):
    """Per-task training config; the rgb protocol decays its learning rate."""
    decay = cfg.task.lr_decay or task == "rgb"
    return replace(cfg.task, lr_decay=decay, **changes)


def _best_report(task: str, tcfg, rows) -> dict:
    """Recompute the report from (possibly resumed) history rows."""
    best = max(range(len(rows)), key=lambda i: float(rows[i]["test_psnr"]))
    return {
        "task": task,
        "source": tcfg.source,
        "fraction": tcfg.fraction,
        "seed": tcfg.seed,
        "best_psnr": float(rows[best]["test_psnr"]),
        "best_ssim": float(rows[best]["test_ssim"]),
        "epoch_of_best": int(rows[best]["epoch"]),
    }


# ---------------------------------------------------------------------------
# pipeline stages

def run_synth(cfg: RunConfig, force=False) -> StageResult:
    run = prepare_run(cfg)
    manifest = RunManifest(run)
    train_cfg = replace(cfg.synth, split="train")
    test_cfg = replace(cfg.synth, split="test", count=cfg.test_count,
                       start_index=cfg.synth.start_index + cfg.synth.count)
    key_obj = {"stage": "synth",
               "train": dataclasses.asdict(train_cfg),
               "test": dataclasses.asdict(test_cfg)}

    def build():
        data = _fresh_dir(run / "data")
        save_dataset(synth_dataset(train_cfg), data)
        save_dataset(synth_dataset(test_cfg), data)

    return run_stage(run, manifest, "synth", key_obj, ["data"], build, force)


def run_train_ae(cfg: RunConfig, force=False) -> StageResult:
    run = prepare_run(cfg)
    manifest = RunManifest(run)
    _require(run, "data/manifest.json", "synth", "train-ae")
    key_obj = {"stage": "train-ae",
               "config": dataclasses.asdict(cfg.ae),
               "inputs": {"data": hash_path(run / "data")}}
    ckpt_rel, hist_rel = "ae/ae.ckpt", "ae/history.csv"

    def cb(net, row):
        save_autoencoder(run / ckpt_rel, net)

    def fresh(on_epoch):
        train, test = _load_splits(run)
        return train_ae(train, cfg.ae, test=test,
                        on_epoch=lambda n, r: (cb(n, r), on_epoch(n, r)))[0]

    def more(net, done, on_epoch):
        train, test = _load_splits(run)
        part = replace(cfg.ae, epochs=cfg.ae.epochs - done)
        return train_ae(train, part, test=test, ae=net,
                        on_epoch=lambda n, r: (cb(n, r), on_epoch(n, r)))[0]

    return _train_stage(run, manifest, "train-ae", key_obj, cfg.ae.epochs,
                        [ckpt_rel, hist_rel], ckpt_rel, hist_rel,
                        AE_HISTORY_FIELDS, load_autoencoder, fresh, more, force)


def run_encode(cfg: RunConfig, force=False) -> StageResult:
    run = prepare_run(cfg)
    manifest = RunManifest(run)
    _require(run, "data/manifest.json", "synth", "encode")
    ckpt = _require(run, "ae/ae.ckpt", "train-ae", "encode")
    key_obj = {"stage": "encode",
               "inputs": {"ae": hash_path(ckpt), "data": hash_path(run / "data")}}

    def build():
        ae = load_autoencoder(ckpt)
        train = load_dataset(run / "data", "train")
        latents = encode_dataset(ae, train)
        save_dataset(latents, _fresh_dir(run / "latents"))

    return run_stage(run, manifest, "encode", key_obj, ["latents"], build, force)


def run_train_gan(cfg: RunConfig, force=False) -> StageResult:
    run = prepare_run(cfg)
    manifest = RunManifest(run)
    target = cfg.gan.target
    if target == "latent":
        if not (run / "latents" / "manifest.json").exists():
            if not (run / "ae" / "ae.ckpt").exists():
                raise DependencyError(
                    "train-gan with the latent target needs an autoencoder; "
                    "run 'train-ae' and 'encode' first"
                )
            raise DependencyError(
                "train-gan with the latent target needs encoded latents; run 'encode' first"
            )
        source_rel = "latents"
    else:
        _require(run, "data/manifest.json", "synth", "train-gan")
        source_rel = "data"

    key_obj = {"stage": f"train-gan:{target}",
               "config": dataclasses.asdict(cfg.gan),
               "inputs": {source_rel: hash_path(run / source_rel)}}
    ckpt_rel = f"gan/{target}/gan.ckpt"
    hist_rel = f"gan/{target}/history.csv"
    ckpt = run / ckpt_rel

    def cb(net, row):
        save_gan(ckpt, net)

    def fresh(on_epoch):
        train = load_dataset(run / source_rel, "train")
        return train_gan(train, cfg.gan,
                         on_epoch=lambda n, r: (cb(n, r), on_epoch(n, r)))[0]

    def more(net, done, on_epoch):
        train = load_dataset(run / source_rel, "train")
        part = replace(cfg.gan, epochs=cfg.gan.epochs - done)
        return train_gan(train, part, gan=net,
                         on_epoch=lambda n, r: (cb(n, r), on_epoch(n, r)))[0]

    return _train_stage(run, manifest, f"train-gan:{target}", key_obj, cfg.gan.epochs,
                        [ckpt_rel, hist_rel], ckpt_rel, hist_rel,
                        GAN_HISTORY_FIELDS, load_gan, fresh, more, force)


def run_sample(cfg: RunConfig, force=False) -> StageResult:
    run = prepare_run(cfg)
    manifest = RunManifest(run)
    target = cfg.gan.target
    source = POOL_OF_TARGET[target]
    gan_ckpt = _require(run, f"gan/{target}/gan.ckpt", "train-gan", "sample")
    inputs = {"gan": hash_path(gan_ckpt)}
    if target == "latent":
        ae_ckpt = _require(run, "ae/ae.ckpt", "train-ae", "sample")
        inputs["ae"] = hash_path(ae_ckpt)
    if cfg.sample_count > 0:
        count = cfg.sample_count
    else:
        _require(run, "data/manifest.json", "synth", "sample")
        count = int(json.loads((run / "data" / "manifest.json").read_text())["train"]["count"])

    key_obj = {"stage": f"sample:{source}", "inputs": inputs,
               "config": {"count": count, "seed": cfg.seed}}

    def build():
        gan = load_gan(gan_ckpt)
        if target == "latent":
            cubes = sample_spectral(count, gan, load_autoencoder(ae_ckpt), seed=cfg.seed)
        else:
            cubes = sample_full(count, gan, seed=cfg.seed)
        pool = Dataset(cubes, [source] * len(cubes), split="pool")
        save_dataset(pool, _fresh_dir(run / "samples" / source))

    return run_stage(run, manifest, f"sample:{source}", key_obj,
                     [f"samples/{source}"], build, force)


def run_train_task(cfg: RunConfig, force=False) -> StageResult:
    run = prepare_run(cfg)
    manifest = RunManifest(run)
    task = cfg.operator.task
    _require(run, "data/manifest.json", "synth", "train-task")
    inputs = {"data": hash_path(run / "data")}
    pool = None
    if cfg.task.source in ("ld-gan", "s-gan"):
        pool_dir = _require(run, f"samples/{cfg.task.source}", "sample", "train-task")
        inputs["pool"] = hash_path(pool_dir)
        pool = load_dataset(pool_dir, "pool")

    tcfg = _task_cfg(cfg, task)
    key_obj = {"stage": f"train-task:{task}",
               "config": dataclasses.asdict(tcfg),
               "operator": dataclasses.asdict(cfg.operator),
               "seed": cfg.seed,
               "inputs": inputs}
    op = _operator_for(cfg, task)
    base = f"task/{task}"
    ckpt_rel, hist_rel = f"{base}/task.ckpt", f"{base}/history.csv"
    ckpt = run / ckpt_rel

    def cb(net, row):
        save_recovery(ckpt, net)

    def fresh(on_epoch):
        train, test = _load_splits(run)
        return train_task(train, test, op, tcfg, pool=pool,
                          on_epoch=lambda n, r: (cb(n, r), on_epoch(n, r)))[0]

    def more(net, done, on_epoch):
        train, test = _load_splits(run)
        lr = tcfg.lr * 0.97 ** done if tcfg.lr_decay else tcfg.lr
        part = replace(tcfg, epochs=tcfg.epochs - done, lr=lr)
        return train_task(train, test, op, part, pool=pool, net=net,
                          on_epoch=lambda n, r: (cb(n, r), on_epoch(n, r)))[0]

    def finish(net, rows):
        report = _best_report(task, tcfg, rows)
        write_history(run / base / "report.csv", [report], REPORT_FIELDS)

    return _train_stage(run, manifest, f"train-task:{task}", key_obj, tcfg.epochs,
                        [ckpt_rel, hist_rel, f"{base}/report.csv"], ckpt_rel, hist_rel,
                        TASK_HISTORY_FIELDS, load_recovery, fresh, more, force,
                        finish=finish)


def run_evaluate(cfg: RunConfig, force=False) -> StageResult:
    run = prepare_run(cfg)
    manifest = RunManifest(run)
    task = cfg.operator.task
    ckpt = _require(run, f"task/{task}/task.ckpt", "train-task", "evaluate")
    _require(run, "data/manifest.json", "synth", "evaluate")
    key_obj = {"stage": f"evaluate:{task}",
               "inputs": {"net": hash_path(ckpt),
                          "data": hash_path(run / "data")}}
    out_rel = f"evaluate/{task}/metrics.csv"

    def build():
        net = load_recovery(ckpt)
        test = load_dataset(run / "data", "test")
        rows = []
        for i, cube in enumerate(test.cubes):
            est = recover(net.op(cube), net)
            rows.append({"index": i,
                         "psnr": psnr_csv_value(psnr(cube, est)),
                         "ssim": ssim(cube, est)})
        (run / f"evaluate/{task}").mkdir(parents=True, exist_ok=True)
        write_history(run / out_rel, rows, ("index", "psnr", "ssim"))

    return run_stage(run, manifest, f"evaluate:{task}", key_obj, [out_rel], build, force)


# ---------------------------------------------------------------------------
# analysis of generated pools

def _source_pools(run, cfg: RunConfig) -> dict:
    """Original cubes plus whichever generated pools exist, size-capped."""
    cap = cfg.analysis.samples
    sources = {"original": load_dataset(run / "data", "train").cubes[:cap]}
    for name in ("ld-gan", "s-gan"):
        root = run / "samples" / name
        if (root / "manifest.json").exists():
            sources[name] = load_dataset(root, "pool").cubes[:cap]
    return sources


def _pixels(cubes) -> np.ndarray:
    return np.concatenate(
        [np.asarray(c, dtype=np.float64).reshape(-1, c.shape[-1]) for c in cubes]
    )


ENDMEMBER_FIELDS = ("source", "endmember", "band", "value", "angle_to_original")


def _endmember_rows(sources: dict, q: int, seed: int) -> list:
    """Per-source endmembers aligned to the original set, long format."""
    ref = vca_endmembers(_pixels(sources["original"]), q, seed=seed)
    rows = []
    for name, cubes in sources.items():
        est = vca_endmembers(_pixels(cubes), q, seed=seed)
        perm, angles = match_endmembers(est.spectra, ref.spectra)
        for j in range(q):
            for band, value in enumerate(est.spectra[perm[j]]):
                rows.append({"source": name, "endmember": j, "band": band,
                             "value": float(value),
                             "angle_to_original": float(angles[j])})
    return rows


def _pca_rows(sources: dict, k: int):
    """Every cube as coordinates in the original split's principal basis."""
    report = pca_report(sources["original"], k)
    k_eff = report.components.shape[0]
    mu = np.mean([np.asarray(c, np.float64).ravel() for c in sources["original"]], axis=0)
    rows = []
    for name, cubes in sources.items():
        if name == "original":
            coords = report.projections
        else:
            vecs = np.asarray([np.asarray(c, np.float64).ravel() for c in cubes])
            coords = (vecs - mu) @ report.components.T
        for i, c in enumerate(coords):
            row = {"source": name, "index": i}
            for j in range(k_eff):
                row[f"pc{j + 1}"] = float(c[j])
            rows.append(row)
    fields = ("source", "index") + tuple(f"pc{j + 1}" for j in range(k_eff))
    return rows, fields


def run_analyze(cfg: RunConfig, force=False) -> StageResult:
    run = prepare_run(cfg)
    manifest = RunManifest(run)
    _require(run, "data/manifest.json", "synth", "analyze")
    inputs = {"data": hash_path(run / "data")}
    for name in ("ld-gan", "s-gan"):
        if (run / "samples" / name / "manifest.json").exists():
            inputs[name] = hash_path(run / "samples" / name)
    key_obj = {"stage": "analyze", "seed": cfg.seed,
               "config": dataclasses.asdict(cfg.analysis), "inputs": inputs}

    def build():
        sources = _source_pools(run, cfg)
        out = run / "analyze"
        out.mkdir(parents=True, exist_ok=True)
        write_history(out / "endmembers.csv",
                      _endmember_rows(sources, cfg.analysis.q, cfg.seed),
                      ENDMEMBER_FIELDS)
        rows, fields = _pca_rows(sources, cfg.analysis.components)
        write_history(out / "pca.csv", rows, fields)

    return run_stage(run, manifest, "analyze", key_obj,
                     ["analyze/endmembers.csv", "analyze/pca.csv"], build, force)


# ---------------------------------------------------------------------------
# experiment suites

def _ensure_pools(cfg: RunConfig, force=False, targets=("latent", "full")):
    """Build everything a suite needs: data, networks, generated pools."""
    run_synth(cfg, force=force)
    if "latent" in targets:
        run_train_ae(cfg, force=force)
        run_encode(cfg, force=force)
    for target in targets:
        c = replace(cfg, gan=replace(cfg.gan, target=target))
        run_train_gan(c, force=force)
        run_sample(c, force=force)


def _load_pools(run):
    return {name: load_dataset(run / "samples" / name, "pool").cubes
            for name in ("ld-gan", "s-gan")}


def _suite_convergence(cfg, run, manifest, force):
    """Adversarial training curves, low-dimensional against full-band."""
    run_synth(cfg, force=force)
    run_train_ae(cfg, force=force)
    run_encode(cfg, force=force)
    for target in ("latent", "full"):
        run_train_gan(replace(cfg, gan=replace(cfg.gan, target=target)), force=force)
    inputs = {t: hash_path(run / "gan" / t / "history.csv") for t in ("latent", "full")}
    key_obj = {"stage": "experiment:convergence", "inputs": inputs}
    ideal = 2.0 * math.log(2.0)  # saturated value of the adversarial objective

    def build():
        rows = []
        for target, channels in (("latent", cfg.ae.channels), ("full", cfg.synth.l)):
            for r in read_history(run / "gan" / target / "history.csv"):
                v = float(r["value_v"])
                rows.append({"target": target, "channels": channels,
                             "epoch": int(r["epoch"]),
                             "loss_d": float(r["loss_d"]),
                             "loss_g": float(r["loss_g"]),
                             "value_v": v, "gap": abs(v + ideal)})
        (run / "experiments").mkdir(exist_ok=True)
        write_history(run / "experiments" / "convergence.csv", rows,
                      ("target", "channels", "epoch", "loss_d", "loss_g", "value_v", "gap"))

    return run_stage(run, manifest, "experiment:convergence", key_obj,
                     ["experiments/convergence.csv"], build, force)


def _suite_da_sweep(cfg, run, manifest, force):
    """Recovery quality against augmentation source and pool fraction."""
    _ensure_pools(cfg, force=force)
    inputs = {"data": hash_path(run / "data"),
              "ld-gan": hash_path(run / "samples" / "ld-gan"),
              "s-gan": hash_path(run / "samples" / "s-gan")}
    key_obj = {"stage": "experiment:da-sweep", "inputs": inputs, "seed": cfg.seed,
               "config": {"task": dataclasses.asdict(cfg.task),
                          "operator": dataclasses.asdict(cfg.operator)}}

    def build():
        train, test = _load_splits(run)
        pools = _load_pools(run)
        combos = [("none", 0.0)]
        combos += [(s, f) for s in ("s-gan", "ld-gan") for f in DA_FRACTIONS]
        rows = []
        for task in TASK_KINDS:
            op = _operator_for(cfg, task)
            for source, fraction in combos:
                tcfg = _task_cfg(cfg, task, source=source, fraction=fraction)
                _, report, _ = train_task(train, test, op, tcfg,
                                          pool=pools.get(source))
                report = dict(report)
                report["task"] = task
                rows.append(report)
        (run / "experiments").mkdir(exist_ok=True)
        write_history(run / "experiments" / "da-sweep.csv", rows, REPORT_FIELDS)

    return run_stage(run, manifest, "experiment:da-sweep", key_obj,
                     ["experiments/da-sweep.csv"], build, force)


def _suite_reg_sweep(cfg, run, manifest, force):
    """Recovery quality over the shared variance-regularizer grid."""
    run_synth(cfg, force=force)
    key_obj = {"stage": "experiment:reg-sweep", "seed": cfg.seed,
               "inputs": {"data": hash_path(run / "data")},
               "config": {"ae": dataclasses.asdict(cfg.ae),
                          "gan": dataclasses.asdict(cfg.gan),
                          "task": dataclasses.asdict(cfg.task),
                          "operator": dataclasses.asdict(cfg.operator),
                          "sample_count": cfg.sample_count,
                          "grid": list(REG_GRID)}}

    def build():
        train, test = _load_splits(run)
        rows = []
        for mu in REG_GRID:
            acfg = replace(cfg.ae, mu_ae=mu)
            gcfg = replace(cfg.gan, mu_gan=mu, target="latent")
            ae, _ = train_ae(train, acfg, test=test)
            gan, _ = train_gan(encode_dataset(ae, train), gcfg)
            pool = sample_spectral(_pool_count(cfg, len(train)), gan, ae, seed=cfg.seed)
            for task in TASK_KINDS:
                op = _operator_for(cfg, task)
                tcfg = _task_cfg(cfg, task, source="ld-gan", fraction=1.0)
                _, report, _ = train_task(train, test, op, tcfg, pool=pool)
                report = dict(report)
                report["task"] = task
                report["mu"] = mu
                rows.append(report)
        (run / "experiments").mkdir(exist_ok=True)
        write_history(run / "experiments" / "reg-sweep.csv", rows,
                      ("mu",) + REPORT_FIELDS)

    return run_stage(run, manifest, "experiment:reg-sweep", key_obj,
                     ["experiments/reg-sweep.csv"], build, force)


def _suite_geo_compare(cfg, run, manifest, force):
    """Method by geometric-augmentation grid over every task."""
    _ensure_pools(cfg, force=force)
    inputs = {"data": hash_path(run / "data"),
              "ld-gan": hash_path(run / "samples" / "ld-gan"),
              "s-gan": hash_path(run / "samples" / "s-gan")}
    key_obj = {"stage": "experiment:geo-compare", "inputs": inputs, "seed": cfg.seed,
               "config": {"task": dataclasses.asdict(cfg.task),
                          "operator": dataclasses.asdict(cfg.operator)}}
    fields = ("task", "method", "geometric", "seed",
              "best_psnr", "best_ssim", "epoch_of_best")

    def build():
        train, test = _load_splits(run)
        pools = _load_pools(run)
        rows = []
        for task in TASK_KINDS:
            op = _operator_for(cfg, task)
            for method in ("baseline", "s-gan", "ld-gan"):
                for geo in (False, True):
                    ds = train
                    if method != "baseline":
                        ds = assemble_augmented(ds, pools[method], 1.0,
                                                provenance=method)
                    if geo:
                        extra = geometric_pool(train, len(train), cfg.seed)
                        ds = Dataset(list(ds.cubes) + extra,
                                     list(ds.provenance) + ["geometric"] * len(extra),
                                     split=ds.split)
                    tcfg = _task_cfg(cfg, task, source="none", fraction=0.0)
                    _, report, _ = train_task(ds, test, op, tcfg)
                    rows.append({"task": task, "method": method, "geometric": geo,
                                 "seed": tcfg.seed,
                                 "best_psnr": report["best_psnr"],
                                 "best_ssim": report["best_ssim"],
                                 "epoch_of_best": report["epoch_of_best"]})
        (run / "experiments").mkdir(exist_ok=True)
        write_history(run / "experiments" / "geo-compare.csv", rows, fields)

    return run_stage(run, manifest, "experiment:geo-compare", key_obj,
                     ["experiments/geo-compare.csv"], build, force)


def _suite_endmembers(cfg, run, manifest, force):
    """Endmember fidelity of generated pools against the original split."""
    _ensure_pools(cfg, force=force)
    inputs = {"data": hash_path(run / "data"),
              "ld-gan": hash_path(run / "samples" / "ld-gan"),
              "s-gan": hash_path(run / "samples" / "s-gan")}
    key_obj = {"stage": "experiment:endmembers", "inputs": inputs, "seed": cfg.seed,
               "config": dataclasses.asdict(cfg.analysis)}

    def build():
        sources = _source_pools(run, cfg)
        (run / "experiments").mkdir(exist_ok=True)
        write_history(run / "experiments" / "endmembers.csv",
                      _endmember_rows(sources, cfg.analysis.q, cfg.seed),
                      ENDMEMBER_FIELDS)

    return run_stage(run, manifest, "experiment:endmembers", key_obj,
                     ["experiments/endmembers.csv"], build, force)


def _suite_pca(cfg, run, manifest, force):
    """Generated pools projected into the original principal basis."""
    _ensure_pools(cfg, force=force)
    inputs = {"data": hash_path(run / "data"),
              "ld-gan": hash_path(run / "samples" / "ld-gan"),
              "s-gan": hash_path(run / "samples" / "s-gan")}
    key_obj = {"stage": "experiment:pca", "inputs": inputs, "seed": cfg.seed,
               "config": dataclasses.asdict(cfg.analysis)}

    def build():
        sources = _source_pools(run, cfg)
        rows, fields = _pca_rows(sources, cfg.analysis.components)
        (run / "experiments").mkdir(exist_ok=True)
        write_history(run / "experiments" / "pca.csv", rows, fields)

    return run_stage(run, manifest, "experiment:pca", key_obj,
                     ["experiments/pca.csv"], build, force)


_SUITE_FUNCS = {
    "convergence": _suite_convergence,
    "da-sweep": _suite_da_sweep,
    "reg-sweep": _suite_reg_sweep,
    "endmembers": _suite_endmembers,
    "pca": _suite_pca,
    "geo-compare": _suite_geo_compare,
}


def run_experiment(cfg: RunConfig, suite: str, force=False) -> StageResult:
    if suite not in _SUITE_FUNCS:
        raise ConfigError(f"unknown experiment suite '{suite}'; choose from {SUITES}")
    run = prepare_run(cfg)
    manifest = RunManifest(run)
    return _SUITE_FUNCS[suite](cfg, run, manifest, force)
