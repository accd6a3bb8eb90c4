"""End-to-end pipeline: simulate -> train -> sensitivity -> allocate /
nas-search -> quantize -> evaluate -> report.

Every stage is keyed by a content hash of its parameters and its
parents' keys; a stage whose key and output hashes match the recorded
ones is skipped. All canonical outputs are deterministic given (config,
seed); wall-clock timings go to a separate, unhashed timing.json.
"""

from __future__ import annotations

import hashlib
import json
import os
import time

import numpy as np

from . import alloc, config as cfgmod, dsp, mixgen, nas, quant, sensitivity, sepnet

UNIFORM_SYSTEMS = (2, 4, 8, 16)
MIXED_METHODS = ("hes", "kl", "nas")


class PipelineError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, default=list)


def _key_of(obj):
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


class Pipeline:
    def __init__(self, cfg, out_dir, jobs=1, force=False, log=print):
        self.cfg = cfg
        self.out = out_dir
        self.jobs = max(1, int(jobs))
        self.force = force
        self.log = log or (lambda *_: None)
        self.records = {}
        self._cache = {}
        os.makedirs(out_dir, exist_ok=True)

    # -- stage machinery -------------------------------------------------------

    def _record_path(self, name):
        return os.path.join(self.out, ".stages", f"{name}.json")

    def _stage(self, name, key_obj, outputs, fn):
        """Run `fn` unless the recorded key and output hashes still match."""
        if name in self.records:
            return self.records[name]["key"]
        key = _key_of(key_obj)
        rec_path = self._record_path(name)
        paths = [os.path.join(self.out, rel) for rel in outputs]
        if not self.force and os.path.exists(rec_path):
            with open(rec_path) as f:
                rec = json.load(f)
            if rec.get("key") == key and all(
                os.path.exists(p) and _sha256_file(p) == rec["outputs"].get(rel)
                for rel, p in zip(outputs, paths)
            ):
                rec["skipped"] = True
                self.records[name] = rec
                self.log(f"[{name}] skipped (cache hit)")
                return key
        self.log(f"[{name}] running")
        t0 = time.monotonic()
        try:
            fn()
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        rec = {
            "key": key,
            "outputs": {rel: _sha256_file(p) for rel, p in zip(outputs, paths)},
            "skipped": False,
        }
        _write_json(rec_path, rec)
        self.records[name] = rec
        self.log(f"[{name}] done in {time.monotonic() - t0:.1f}s")
        return key

    # -- shared artifacts -------------------------------------------------------

    def _dataset(self):
        if "dataset" not in self._cache:
            mc = self.cfg.mix_config()
            self._cache["dataset"] = mixgen.dataset(
                mc, self.cfg.mixgen.n_scenes, self.cfg.mixgen.seed, self.cfg.mixgen.ratios
            )
        return self._cache["dataset"]

    def _examples(self, split):
        key = f"examples_{split}"
        if key not in self._cache:
            stft_cfg = self.cfg.stft_config()
            scenes = getattr(self._dataset(), split)
            enc = self.cfg.model.ipd_encoding
            self._cache[key] = [
                sepnet.prepare_example(s, stft_cfg, ipd_encoding=enc) for s in scenes
            ]
        return self._cache[key]

    def _model(self):
        if "model" not in self._cache:
            self._cache["model"] = sepnet.load_checkpoint(os.path.join(self.out, "train"))
        return self._cache["model"]

    def _checkpoint_sha(self):
        return sepnet.checkpoint_hash(os.path.join(self.out, "train"))

    # -- stages -------------------------------------------------------------------

    def simulate(self):
        c = self.cfg
        key_obj = {
            "stage": "simulate",
            "mixgen": cfgmod.to_dict(c)["mixgen"],
            "array": cfgmod.to_dict(c)["array"],
            "sample_rate": c.stft.sample_rate,
        }

        def fn():
            ds = self._dataset()
            scenes_dir = os.path.join(self.out, "scenes")
            os.makedirs(scenes_dir, exist_ok=True)
            mixgen.save_manifest(ds, os.path.join(scenes_dir, "manifest.json"))
            for split in ("train", "val", "test"):
                for i, sc in enumerate(getattr(ds, split)):
                    stem = os.path.join(scenes_dir, f"{split}_{i:05d}")
                    dsp.write_wav(f"{stem}_mix.wav", sc.mixture.T, sc.sample_rate)
                    dsp.write_wav(f"{stem}_target.wav", sc.target_ref, sc.sample_rate)

        return self._stage("simulate", key_obj, ["scenes/manifest.json"], fn)

    def train(self):
        sim_key = self.simulate()
        c = cfgmod.to_dict(self.cfg)
        key_obj = {
            "stage": "train",
            "parent": sim_key,
            "stft": c["stft"],
            "model": c["model"],
            "train": c["train"],
        }

        def fn():
            model = sepnet.SepModel(self.cfg.sep_config(), seed=self.cfg.train.seed)
            result = sepnet.train(
                model, self._examples("train"), self.cfg.train_config(), self.cfg.stft_config()
            )
            sepnet.save_checkpoint(model, os.path.join(self.out, "train"))
            _write_json(
                os.path.join(self.out, "train", "loss_curve.json"),
                {"loss_curve": result.loss_curve, "epoch_means": result.epoch_means},
            )
            self._cache["model"] = model

        return self._stage(
            "train", key_obj, ["train/model.json", "train/model.bin", "train/loss_curve.json"], fn
        )

    def sensitivity(self, metric):
        train_key = self.train()
        c = cfgmod.to_dict(self.cfg)
        key_obj = {
            "stage": f"sensitivity_{metric}",
            "parent": train_key,
            "sensitivity": c["sensitivity"],
            "quant": c["quant"],
        }
        out_rel = f"sensitivity/{metric}.json"

        def fn():
            model = self._model()
            sc = self.cfg.sensitivity
            probes = self._examples(sc.probe_split)[: sc.probe_scenes]
            hes_probes = self._examples(sc.hes_probe_split)[
                : sc.hes_probe_scenes or sc.probe_scenes
            ]
            stft_cfg = self.cfg.stft_config()
            qc = self.cfg.quant
            if metric == "hes":
                prof = sensitivity.hessian_sensitivity(
                    model,
                    hes_probes,
                    stft_cfg,
                    candidates=qc.candidates,
                    m=self.cfg.sensitivity.m,
                    seed=self.cfg.sensitivity.seed,
                    granularity=qc.granularity,
                    scale_method=qc.scale_method,
                    sampler=self.cfg.sensitivity.sampler,
                    loss_kind=self.cfg.sensitivity.loss,
                    checkpoint_sha256=self._checkpoint_sha(),
                )
            else:
                prof = sensitivity.kl_sensitivity(
                    model,
                    probes,
                    stft_cfg,
                    candidates=qc.candidates,
                    granularity=qc.granularity,
                    scale_method=qc.scale_method,
                    checkpoint_sha256=self._checkpoint_sha(),
                    jobs=self.jobs,
                )
            os.makedirs(os.path.join(self.out, "sensitivity"), exist_ok=True)
            prof.save(os.path.join(self.out, out_rel))

        return self._stage(f"sensitivity_{metric}", key_obj, [out_rel], fn)

    def allocate(self, metric, budget):
        sens_key = self.sensitivity(metric)
        name = f"allocate_{metric}_b{budget:g}"
        key_obj = {"stage": name, "parent": sens_key, "budget": budget}
        out_rel = f"alloc/{metric}_b{budget:g}.json"

        def fn():
            prof = sensitivity.SensitivityProfile.load(
                os.path.join(self.out, f"sensitivity/{metric}.json")
            )
            assignment = alloc.allocate(prof, budget_avg_bits=budget)
            os.makedirs(os.path.join(self.out, "alloc"), exist_ok=True)
            assignment.save(os.path.join(self.out, out_rel))

        self._stage(name, key_obj, [out_rel], fn)
        return name, out_rel

    def nas_search(self, budget):
        train_key = self.train()
        c = cfgmod.to_dict(self.cfg)
        name = f"nas_b{budget:g}"
        key_obj = {
            "stage": name,
            "parent": train_key,
            "nas": c["nas"],
            "quant": c["quant"],
            "budget": budget,
        }
        out_rel = f"nas/nas_b{budget:g}.json"

        def fn():
            model = self._model()
            qc = self.cfg.quant
            sn = nas.supernet_from_model(
                model, qc.candidates, qc.granularity, qc.scale_method
            )
            probes = self._examples("train")[: self.cfg.nas.probe_scenes]
            assignment = nas.search(
                sn,
                probes,
                self.cfg.stft_config(),
                beta=self.cfg.nas.beta,
                lr=self.cfg.nas.lr,
                steps=self.cfg.nas.steps,
                batch_size=self.cfg.nas.batch_size,
                seed=self.cfg.nas.seed,
                target_avg_bits=budget,
                max_rounds=self.cfg.nas.max_rounds,
                mixing=self.cfg.nas.mixing,
            )
            assignment.checkpoint_sha256 = self._checkpoint_sha()
            os.makedirs(os.path.join(self.out, "nas"), exist_ok=True)
            assignment.save(os.path.join(self.out, out_rel))

        self._stage(name, key_obj, [out_rel], fn)
        return name, out_rel

    def _systems(self):
        """(system name, kind, detail) for every trained/quantized variant."""
        systems = [("fp32", "full", None)]
        for n in UNIFORM_SYSTEMS:
            if n in self.cfg.quant.candidates:
                systems.append((f"uniform{n}", "uniform", n))
        for budget in self.cfg.alloc.budgets:
            for metric in ("hes", "kl"):
                systems.append((f"{metric}_avg{budget:g}", "mixed", (metric, budget)))
            systems.append((f"nas_avg{budget:g}", "mixed", ("nas", budget)))
        return systems

    def quantize(self, system):
        name, kind, detail = system
        if kind == "full":
            return None
        train_key = self.train()
        qc = self.cfg.quant
        out_rel = f"quant/{name}.qsep"

        def bits_map_and_parent():
            model = self._model()
            entries = sepnet.quantizable_clusters(model, qc.granularity)
            if kind == "uniform":
                return {e.cluster_id: detail for e in entries}, train_key
            metric, budget = detail
            if metric == "nas":
                stage_name, rel = self.nas_search(budget)
            else:
                stage_name, rel = self.allocate(metric, budget)
            assignment = alloc.PrecisionAssignment.load(os.path.join(self.out, rel))
            return assignment.bits, self.records[stage_name]["key"]

        bits_map, parent_key = bits_map_and_parent()
        key_obj = {
            "stage": f"quantize_{name}",
            "parent": parent_key,
            "train": train_key,
            "quant": cfgmod.to_dict(self.cfg)["quant"],
            "bits": bits_map,
        }

        def fn():
            model = self._model()
            packed = quant.quantize_model(
                model,
                bits_map,
                qc.granularity,
                qc.scale_method,
                base_checkpoint_sha256=self._checkpoint_sha(),
            )
            os.makedirs(os.path.join(self.out, "quant"), exist_ok=True)
            quant.write_packed(packed, os.path.join(self.out, out_rel))

        self._stage(f"quantize_{name}", key_obj, [out_rel], fn)
        return out_rel

    def evaluate(self, system):
        name, kind, detail = system
        packed_rel = self.quantize(system)
        parent = (
            self.records[f"quantize_{name}"]["key"] if packed_rel else self.train()
        )
        key_obj = {
            "stage": f"evaluate_{name}",
            "parent": parent,
            "eval": cfgmod.to_dict(self.cfg)["eval"],
            "simulate": self.simulate(),
        }
        out_rel = f"eval/{name}.json"

        def fn():
            base = self._model()
            if packed_rel:
                packed = quant.read_packed(os.path.join(self.out, packed_rel))
                model = quant.dequantize_model(packed, base)
                census_all = sepnet.census(base, self.cfg.quant.granularity)
                bits_map = {row["id"]: row["bits"] for row in packed.clusters}
                size = quant.model_size(census_all, bits_map)
                avg_bits = size.avg_bits
                model_bytes = size.total_bytes
            else:
                model = base
                census_all = sepnet.census(base, self.cfg.quant.granularity)
                total = sum(e.count for e in census_all)
                avg_bits = 32.0
                model_bytes = total * 4
            report, seconds_per_hour = _evaluate_model(
                model,
                self._examples("test"),
                self.cfg.stft_config(),
                self.cfg.eval.cap_db,
                self.cfg.eval.timing_runs,
            )
            report.update(
                {
                    "system": name,
                    "kind": kind,
                    "avg_bits": avg_bits,
                    "model_bytes": int(model_bytes),
                    "checkpoint_sha256": self._checkpoint_sha(),
                    "packed_sha256": (
                        self.records[f"quantize_{name}"]["outputs"][packed_rel]
                        if packed_rel
                        else None
                    ),
                }
            )
            _write_json(os.path.join(self.out, out_rel), report)
            _write_eval_csv(os.path.join(self.out, f"eval/{name}.csv"), report)
            timing_path = os.path.join(self.out, "timing.json")
            timing = {}
            if os.path.exists(timing_path):
                with open(timing_path) as f:
                    timing = json.load(f)
            timing[name] = seconds_per_hour
            _write_json(timing_path, timing)

        self._stage(f"evaluate_{name}", key_obj, [out_rel, f"eval/{name}.csv"], fn)
        return out_rel

    def report(self):
        systems = self._systems()
        eval_rels = [self.evaluate(s) for s in systems]
        parents = [self.records[f"evaluate_{s[0]}"]["key"] for s in systems]
        key_obj = {"stage": "report", "parents": parents}
        out_rels = ["report/comparison.csv", "report/comparison.json",
                    "report/precision_profile.csv"]

        def fn():
            reports = []
            for rel in eval_rels:
                with open(os.path.join(self.out, rel)) as f:
                    reports.append(json.load(f))
            _write_comparison(self.out, reports)
            _write_precision_profiles(self.out, self.cfg, self._model())

        self._stage("report", key_obj, out_rels, fn)
        return out_rels

    def run_all(self):
        self.report()
        return self.finalize()

    def finalize(self):
        run = {
            "config_hash": cfgmod.config_hash(self.cfg),
            "config": cfgmod.to_dict(self.cfg),
            "stages": {
                name: {"key": rec["key"], "skipped": rec.get("skipped", False),
                       "outputs": rec["outputs"]}
                for name, rec in sorted(self.records.items())
            },
        }
        _write_json(os.path.join(self.out, "run.json"), run)
        return run


def _evaluate_model(model, examples, stft_cfg, cap_db, timing_runs):
    """Per-bucket and mean SI-SNR plus the mixture baseline; returns the
    deterministic report dict and the (non-deterministic) seconds of
    evaluation wall time per hour of audio."""
    per_scene = []
    audio_seconds = 0.0
    runs = []
    for run in range(max(1, timing_runs)):
        t0 = time.monotonic()
        for ex in examples:
            est = sepnet.separate(model, ex, stft_cfg)
            if run == 0:
                region = sepnet.loss_region(stft_cfg, len(est))
                audio_seconds += len(est) / stft_cfg.sample_rate
                per_scene.append(
                    {
                        "bucket": ex.bucket,
                        "si_snr": dsp.si_snr(est[region], ex.target[region], cap_db),
                        "mixture_si_snr": dsp.si_snr(
                            ex.mixture_ref[region], ex.target[region], cap_db
                        ),
                    }
                )
        runs.append(time.monotonic() - t0)
    seconds_per_hour = float(np.median(runs) / max(audio_seconds / 3600.0, 1e-12))

    buckets = {}
    for row in per_scene:
        buckets.setdefault(row["bucket"], []).append(row)
    bucket_stats = {}
    for b in range(len(mixgen.ANGLE_BUCKETS_DEG)):
        rows = buckets.get(b, [])
        if rows:
            bucket_stats[str(b)] = {
                "n": len(rows),
                "si_snr": float(np.mean([r["si_snr"] for r in rows])),
                "mixture_si_snr": float(np.mean([r["mixture_si_snr"] for r in rows])),
            }
        else:
            bucket_stats[str(b)] = {"n": 0, "si_snr": None, "mixture_si_snr": None}
    mean = float(np.mean([r["si_snr"] for r in per_scene]))
    mix_mean = float(np.mean([r["mixture_si_snr"] for r in per_scene]))
    return (
        {
            "n_scenes": len(per_scene),
            "si_snr_mean": mean,
            "mixture_si_snr_mean": mix_mean,
            "si_snr_improvement": mean - mix_mean,
            "buckets": bucket_stats,
            "angle_buckets_deg": [list(b) for b in mixgen.ANGLE_BUCKETS_DEG],
            "per_scene": per_scene,
        },
        seconds_per_hour,
    )


def _write_eval_csv(path, report):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    lines = ["bucket_deg,n,si_snr_db,mixture_si_snr_db"]
    for b, (lo, hi) in enumerate(mixgen.ANGLE_BUCKETS_DEG):
        row = report["buckets"][str(b)]
        si = "" if row["si_snr"] is None else f"{row['si_snr']:.4f}"
        mx = "" if row["mixture_si_snr"] is None else f"{row['mixture_si_snr']:.4f}"
        lines.append(f"{lo:g}-{hi:g},{row['n']},{si},{mx}")
    lines.append(f"mean,{report['n_scenes']},{report['si_snr_mean']:.4f},"
                 f"{report['mixture_si_snr_mean']:.4f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _write_comparison(out_dir, reports):
    header = (
        "system,kind,avg_bits,si_snr_0_15,si_snr_15_45,si_snr_45_90,si_snr_90_180,"
        "si_snr_mean,si_snr_improvement,model_mb"
    )
    lines = [header]
    for rep in reports:
        cells = [rep["system"], rep["kind"], f"{rep['avg_bits']:.4g}"]
        for b in range(4):
            v = rep["buckets"][str(b)]["si_snr"]
            cells.append("" if v is None else f"{v:.4f}")
        cells.append(f"{rep['si_snr_mean']:.4f}")
        cells.append(f"{rep['si_snr_improvement']:.4f}")
        cells.append(f"{rep['model_bytes'] / 1e6:.6f}")
        lines.append(",".join(cells))
    path = os.path.join(out_dir, "report", "comparison.csv")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    _write_json(
        os.path.join(out_dir, "report", "comparison.json"),
        {"systems": reports},
    )


def _write_precision_profiles(out_dir, cfg, model):
    """Figure-3-style per-cluster bit table for every mixed assignment
    of the current configuration (stale files in a reused directory are
    ignored)."""
    lines = ["assignment,cluster,bits,params"]
    entries = sepnet.quantizable_clusters(model, cfg.quant.granularity)
    rels = []
    for budget in cfg.alloc.budgets:
        rels += [os.path.join("alloc", f"hes_b{budget:g}.json"),
                 os.path.join("alloc", f"kl_b{budget:g}.json"),
                 os.path.join("nas", f"nas_b{budget:g}.json")]
    for rel in rels:
        path = os.path.join(out_dir, rel)
        if not os.path.exists(path):
            continue
        assignment = alloc.PrecisionAssignment.load(path)
        label = os.path.basename(rel)[: -len(".json")]
        for e in entries:
            lines.append(
                f"{label},{e.cluster_id},{assignment.bits[e.cluster_id]},{e.count}"
            )
    path = os.path.join(out_dir, "report", "precision_profile.csv")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
