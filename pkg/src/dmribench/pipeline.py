"""Declarative benchmark runner: inputs, noise, denoisers, subsampling, fits and a CSV report."""
from __future__ import annotations

import hashlib
import json
import os
import platform
import shlex
import shutil
import subprocess
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .design import select_subset, subset_scheme
from .dti import fit_dti, mae_metric, tensor_scalars, v1_angular_error
from .errors import (
    ExternalDenoiserFailed,
    ExternalDenoiserTimeout,
    GridMismatch,
    PipelineError,
)
from .mppca import PatchConfig, denoise_mppca
from .phantom import add_noise, make_phantom, random_kspace_augment, spec_from_json
from .shm import fit_shell, jsd_map
from .volume import (
    SHELL_ROUNDING,
    Volume4D,
    as_labels,
    as_mask,
    read_gradients,
    read_nifti,
    shell_partition,
    write_nifti,
)

SCALAR_METRICS = ("FA", "MD", "AD", "RD")
ALL_METRICS = SCALAR_METRICS + ("V1", "JSD")
REPORT_HEADER = ("method", "subset", "metric", "region", "value")


@dataclass
class DenoiserSpec:
    name: str
    kind: str  # "none", "mppca" or "external"
    command: str = ""
    timeout: float = 3600.0


@dataclass
class PipelineConfig:
    """A benchmark run.

    ``inputs`` holds either ``{"phantom": <phantom spec JSON or path>}`` or
    file paths ``dwi``, ``bval``, ``bvec`` and optional ``mask``/``labels``.
    ``noise`` is ``{"model": "rician"|"gaussian", "sigma": float}`` or uses
    ``"snr"`` (sigma = mean b0 / snr inside the mask).  ``subsets`` lists the
    DTI subset sizes; ``sh`` optionally adds an SH fit of ``order`` on
    ``k`` directions of shell ``bval``.  ``denoise_on`` is ``"subset"``
    (denoise the subsampled series) or ``"full"`` (denoise, then subsample).
    """

    output: str
    inputs: dict
    seed: int = None
    noise: dict = None
    augment: dict = None
    denoisers: list = field(default_factory=lambda: [DenoiserSpec("RAW", "none")])
    denoise_on: str = "subset"
    shell: float = 1000.0
    subsets: list = field(default_factory=lambda: [6])
    sh: dict = None
    metrics: list = None  # default: every DTI metric, plus JSD when ``sh`` is set
    dti_method: str = "wls"
    patch: PatchConfig = field(default_factory=PatchConfig)
    selection: dict = field(default_factory=dict)
    threads: int = 1
    base_dir: str = "."

    @classmethod
    def from_dict(cls, obj, base_dir="."):
        obj = dict(obj)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "denoisers" in obj:
            obj["denoisers"] = [_parse_denoiser(d) for d in obj["denoisers"]]
        if "patch" in obj:
            obj["patch"] = PatchConfig(**obj["patch"])
        obj.setdefault("base_dir", str(base_dir))
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), path.parent)

    def path(self, p):
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self):
        if not self.output:
            raise ValueError("config needs an output directory")
        if self.metrics is None:
            self.metrics = list(SCALAR_METRICS + ("V1",) + (("JSD",) if self.sh else ()))
        if "phantom" in self.inputs:
            ph = self.inputs["phantom"]
            if isinstance(ph, str) and not self.path(ph).is_file():
                raise FileNotFoundError(f"phantom spec not found: {ph}")
        else:
            for key in ("dwi", "bval", "bvec"):
                if key not in self.inputs:
                    raise ValueError(f"inputs need 'phantom' or '{key}'")
            for key in ("dwi", "bval", "bvec", "mask", "labels"):
                if key in self.inputs and not self.path(self.inputs[key]).is_file():
                    raise FileNotFoundError(f"input {key} not found: {self.inputs[key]}")
        stochastic = bool(self.noise) or bool(self.augment) or bool(self.subsets) or bool(self.sh)
        if stochastic and self.seed is None:
            raise ValueError("seed is required when noise, augmentation or subset selection is used")
        bad = [m for m in self.metrics if m not in ALL_METRICS]
        if bad:
            raise ValueError(f"unknown metrics {bad}; choose from {ALL_METRICS}")
        if "JSD" in self.metrics and not self.sh:
            raise ValueError("the JSD metric needs an 'sh' section")
        if self.denoise_on not in ("subset", "full"):
            raise ValueError("denoise_on must be 'subset' or 'full'")
        if self.noise:
            if self.noise.get("model", "rician") not in ("rician", "gaussian"):
                raise ValueError("noise model must be 'rician' or 'gaussian'")
            if ("sigma" in self.noise) == ("snr" in self.noise):
                raise ValueError("noise needs exactly one of 'sigma' or 'snr'")
        names = [d.name for d in self.denoisers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate denoiser names {names}")
        for d in self.denoisers:
            if d.kind == "external" and ("{in}" not in d.command or "{out}" not in d.command):
                raise ValueError(f"denoiser {d.name}: command needs {{in}} and {{out}} placeholders")

    def canonical(self):
        d = asdict(self)
        d.pop("base_dir")
        d.pop("threads")
        return d


def _parse_denoiser(d):
    if isinstance(d, DenoiserSpec):
        return d
    if isinstance(d, str):
        if d in ("none", "raw", "RAW"):
            return DenoiserSpec("RAW", "none")
        if d in ("mppca", "MPPCA"):
            return DenoiserSpec("MPPCA", "mppca")
        raise ValueError(f"unknown denoiser {d!r}")
    if "command" in d:
        return DenoiserSpec(d.get("name", "EXTERNAL"), "external", d["command"],
                            float(d.get("timeout", 3600.0)))
    kind = d.get("kind", "none")
    return DenoiserSpec(d.get("name", kind.upper()), kind)


# --- external denoiser hook ---------------------------------------------------------

def external_denoiser(cmd_template, vol, timeout=3600.0, workdir=None):
    """Run a file-in/file-out denoiser.

    ``cmd_template`` is split with shell quoting rules and every ``{in}`` and
    ``{out}`` is replaced by a NIfTI path.  The result must share the input
    grid and volume count.
    """
    if "{in}" not in cmd_template or "{out}" not in cmd_template:
        raise ValueError("command template needs {in} and {out} placeholders")
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        src = os.path.join(tmp, "in.nii.gz")
        dst = os.path.join(tmp, "out.nii.gz")
        write_nifti(vol, src, datatype="float64")
        args = [a.replace("{in}", src).replace("{out}", dst) for a in shlex.split(cmd_template)]
        try:
            proc = subprocess.run(args, capture_output=True, text=True, timeout=timeout)
        except subprocess.TimeoutExpired as exc:
            raise ExternalDenoiserTimeout(f"denoiser exceeded {timeout} s",
                                          stderr=_text(exc.stderr)) from None
        except OSError as exc:
            raise ExternalDenoiserFailed(f"could not start denoiser: {exc}") from None
        if proc.returncode != 0:
            raise ExternalDenoiserFailed(
                f"denoiser exited with status {proc.returncode}: {proc.stderr.strip()[-2000:]}",
                proc.returncode, proc.stderr)
        if not os.path.exists(dst):
            raise ExternalDenoiserFailed("denoiser did not write its output", 0, proc.stderr)
        out = read_nifti(dst)
    if out.dims != vol.dims:
        raise GridMismatch(f"denoiser output {out.dims} does not match input {vol.dims}")
    return Volume4D(out.data, vol.spacing, vol.affine)


def _text(x):
    if x is None:
        return ""
    return x.decode(errors="replace") if isinstance(x, bytes) else x


# --- helpers -------------------------------------------------------------------------

@contextmanager
def _stage(name):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _fmt(x):
    return "nan" if not np.isfinite(x) else format(float(x), ".10g")


def _stage_seeds(seed):
    # fixed child order: augment, noise, selection
    children = np.random.SeedSequence(seed).spawn(3)
    return {
        "augment": children[0],
        "noise": int(children[1].generate_state(1)[0]),
        "selection": int(children[2].generate_state(1)[0]),
    }


def _regions(labels, mask):
    out = [("all", mask)]
    if labels is not None:
        for r in np.unique(labels[labels > 0]):
            out.append((str(int(r)), (labels == r) & mask))
    return out


# --- the run ---------------------------------------------------------------------------

def _load_inputs(cfg):
    inp = cfg.inputs
    hashes = {}
    if "phantom" in inp:
        ph = inp["phantom"]
        if isinstance(ph, str):
            hashes["phantom"] = _sha256(cfg.path(ph))
            spec = spec_from_json(cfg.path(ph))
        else:
            blob = json.dumps(ph, sort_keys=True).encode()
            hashes["phantom"] = hashlib.sha256(blob).hexdigest()
            spec = spec_from_json(ph, Path(cfg.base_dir))
        spec.noise_sigma = 0.0  # noise is its own stage
        vol, scheme, _, labels = make_phantom(spec, cfg.seed or 0)
        mask = labels > 0
        return vol, scheme, mask, labels, True, hashes
    vol = read_nifti(cfg.path(inp["dwi"]))
    scheme = read_gradients(cfg.path(inp["bval"]), cfg.path(inp["bvec"]))
    for key in ("dwi", "bval", "bvec", "mask", "labels"):
        if key in inp:
            hashes[key] = _sha256(cfg.path(inp[key]))
    if len(scheme) != vol.nvols:
        raise ValueError(f"gradient table has {len(scheme)} rows, DWI has {vol.nvols} volumes")
    labels = as_labels(read_nifti(cfg.path(inp["labels"])), vol.grid) if "labels" in inp else None
    if "mask" in inp:
        mask = as_mask(read_nifti(cfg.path(inp["mask"])).data[..., 0], vol.grid)
    elif labels is not None:
        mask = labels > 0
    else:
        mask = np.ones(vol.grid, dtype=bool)
    return vol, scheme, mask, labels, False, hashes


def _denoise(d, vol, cfg, mask):
    if d.kind == "none":
        return vol
    if d.kind == "mppca":
        return denoise_mppca(vol, cfg.patch, threads=cfg.threads)[0]
    if d.kind == "external":
        return external_denoiser(d.command, vol, d.timeout)
    raise ValueError(f"unknown denoiser kind {d.kind!r}")


def _shell_indices(scheme, bval):
    shells = {s.bval: list(s.indices) for s in shell_partition(scheme, SHELL_ROUNDING)}
    key = float(np.round(bval / SHELL_ROUNDING) * SHELL_ROUNDING)
    if key not in shells or key == 0.0:
        raise ValueError(f"no shell at b={bval}; available {sorted(shells)}")
    return shells[key]


def _select(cfg, scheme, seeds):
    """Subset plans ``(kind, name, volume indices, condition number)``."""
    sel_opts = dict(cfg.selection)
    chosen_record = {}

    need_dti = any(m in cfg.metrics for m in SCALAR_METRICS + ("V1",))
    with _stage("subset"):
        plans = []
        if need_dti:
            shell = _shell_indices(scheme, cfg.shell)
            for k in cfg.subsets:
                sel = select_subset(scheme.bvecs[shell], int(k), "dti", seed=seeds["selection"],
                                    threads=cfg.threads, **sel_opts)
                idx = subset_scheme(scheme, shell, sel.indices)
                plans.append(("dti", f"dti{k}", idx, sel.condition_number))
        if cfg.sh:
            order, k = int(cfg.sh["order"]), int(cfg.sh["k"])
            shell = _shell_indices(scheme, cfg.sh["bval"])
            sel = select_subset(scheme.bvecs[shell], k, f"sh{order}", seed=seeds["selection"],
                                threads=cfg.threads, **sel_opts)
            idx = subset_scheme(scheme, shell, sel.indices)
            plans.append(("sh", f"sh{order}k{k}", idx, sel.condition_number))
        for _, name, idx, cond in plans:
            chosen_record[name] = {"indices": [int(i) for i in idx],
                                   "condition_number": float(cond)}
    return plans, chosen_record


def _metric_rows(cfg, method, plans, series, ref, mask, labels):
    rows = []
    regions = _regions(labels, mask)
    for kind, name, _, _ in plans:
        sub = series[name]
        if kind == "dti":
            with _stage("fit"):
                fit = fit_dti(sub["vol"], sub["scheme"], mask, cfg.dti_method)
                scal = tensor_scalars(fit)
            with _stage("metrics"):
                for metric in cfg.metrics:
                    for rname, rmask in regions:
                        if not rmask.any():
                            continue
                        if metric in SCALAR_METRICS:
                            val = mae_metric(metric, scal[metric], ref["dti"][metric], rmask)
                        elif metric == "V1":
                            val = v1_angular_error(scal["V1"], ref["dti"]["V1"], rmask)
                        else:
                            continue
                        rows.append((method, name, metric, rname, val))
        else:
            if "JSD" not in cfg.metrics:
                continue
            with _stage("fit"):
                fitted = fit_shell(sub["vol"], sub["scheme"], cfg.sh["bval"], int(cfg.sh["order"]),
                                   mask, float(cfg.sh.get("lambda_lb", 0.0)))
            with _stage("metrics"):
                jm = jsd_map(fitted, ref["sh"], mask)
                for rname, rmask in regions:
                    vals = jm[rmask]
                    vals = vals[np.isfinite(vals)]
                    if vals.size:
                        rows.append((method, name, "JSD", rname, float(vals.mean())))
    return rows


def run_pipeline(cfg):
    """Execute a benchmark run and write ``report.csv`` and ``manifest.json``.

    Ground truth is the fit on the noiseless full acquisition for phantoms
    (after augmentation, if any) and on the full acquisition for real data.
    Outputs are assembled in a temporary directory and moved into place only
    on success.  Returns the output directory.
    """
    if isinstance(cfg, (str, Path)):
        cfg = PipelineConfig.from_json(cfg)
    out_dir = cfg.path(cfg.output)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        manifest = _run(cfg, tmp)
        report_hash = _sha256(tmp / "report.csv")
        manifest["outputs"] = {"report.csv": report_hash}
        text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        (tmp / "manifest.json").write_text(text, encoding="utf-8")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir


def _run(cfg, tmp):
    seeds = _stage_seeds(cfg.seed or 0)
    with _stage("ingest"):
        vol, scheme, mask, labels, synthetic, hashes = _load_inputs(cfg)
    augment_target = None
    if cfg.augment:
        with _stage("augment"):
            rng = np.random.default_rng(seeds["augment"])
            vol, augment_target = random_kspace_augment(
                vol, rng, float(cfg.augment.get("probability", 0.5)),
                tuple(cfg.augment.get("spacing_range", (1.25, 3.0))),
                cfg.augment.get("reconstruct", "linear"))
    clean = vol

    with _stage("reference"):
        ref = {}
        if any(m in cfg.metrics for m in SCALAR_METRICS + ("V1",)):
            ref["dti"] = tensor_scalars(fit_dti(clean, scheme, mask, cfg.dti_method))
        if cfg.sh and "JSD" in cfg.metrics:
            ref["sh"] = fit_shell(clean, scheme, cfg.sh["bval"], int(cfg.sh["order"]), mask,
                                  float(cfg.sh.get("lambda_lb", 0.0)))

    sigma = 0.0
    if cfg.noise:
        with _stage("noise"):
            if "sigma" in cfg.noise:
                sigma = float(cfg.noise["sigma"])
            else:
                b0 = clean.data[mask][:, scheme.b0_mask].mean()
                sigma = float(b0 / float(cfg.noise["snr"]))
            vol = add_noise(clean, cfg.noise.get("model", "rician"), sigma, seeds["noise"])

    plans, chosen = _select(cfg, scheme, seeds)

    rows = []
    for d in cfg.denoisers:
        with _stage(f"denoise:{d.name}"):
            series = {}
            full = _denoise(d, vol, cfg, mask) if cfg.denoise_on == "full" else None
            for _, name, idx, _ in plans:
                if cfg.denoise_on == "full":
                    sub_vol = full.take(idx)
                else:
                    sub_vol = _denoise(d, vol.take(idx), cfg, mask)
                series[name] = {"vol": sub_vol, "scheme": scheme.subset(idx)}
        rows += _metric_rows(cfg, d.name, plans, series, ref, mask, labels)

    with open(tmp / "report.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(REPORT_HEADER) + "\n")
        for method, subset, metric, region, value in rows:
            fh.write(f"{method},{subset},{metric},{region},{_fmt(value)}\n")

    return {
        "dmribench": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
        "seed": cfg.seed,
        "stage_seeds": {"noise": seeds["noise"], "selection": seeds["selection"]},
        "noise_sigma": sigma,
        "augment_target_spacing": augment_target,
        "synthetic": synthetic,
        "inputs": hashes,
        "subsets": chosen,
        "config": cfg.canonical(),
    }
