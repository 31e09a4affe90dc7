"""Command-line interface: one subcommand per operation plus the ``run`` benchmark driver."""
from __future__ import annotations

import argparse
import csv
import os
import sys
import warnings

import numpy as np

from .design import select_subset, sh_order_from_count
from .dti import fit_dti, mae_metric, tensor_scalars, v1_angular_error
from .errors import DmriError
from .mppca import PatchConfig, denoise_mppca, residual_moments
from .phantom import add_noise, kspace_downsample, make_phantom, spec_from_json
from .pipeline import PipelineConfig, run_pipeline
from .reliability import (
    cov_within_subject,
    read_means_csv,
    read_scn_csv,
    region_means,
    scn_build,
    scn_mae,
    write_scn_csv,
)
from .shm import ShCoeffMap, fit_shell, jsd_map
from .volume import (
    Volume4D,
    as_labels,
    as_mask,
    read_gradients,
    read_nifti,
    write_gradients,
    write_nifti,
)


def _threads(value):
    if value is not None:
        return value
    env = os.environ.get("DMRI_THREADS")
    return int(env) if env else 1


def _mask(path, grid):
    if path is None:
        return None
    return as_mask(read_nifti(path).data[..., 0], grid)


def _write_rows(rows, out):
    fh = open(out, "w", newline="", encoding="utf-8") if out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "region", "value"])
        for metric, region, value in rows:
            w.writerow([metric, region, format(float(value), ".10g")])
    finally:
        if out:
            fh.close()


def _region_list(labels, mask):
    # "all" is the mask (or the whole grid), then one entry per label
    out = [("all", mask)]
    if labels is not None:
        for r in np.unique(labels[labels > 0]):
            out.append((str(int(r)), labels == r))
    return out


# --- handlers ---------------------------------------------------------------------

def cmd_phantom_gen(a):
    spec = spec_from_json(a.spec)
    vol, scheme, truth, labels = make_phantom(spec, a.seed)
    p = a.out_prefix
    write_nifti(vol, f"{p}_dwi.nii.gz")
    write_gradients(scheme, f"{p}.bval", f"{p}.bvec")
    write_nifti(Volume4D(labels.astype(np.float64), vol.spacing), f"{p}_labels.nii.gz")
    for name, m in tensor_scalars(truth).items():
        write_nifti(Volume4D(m, vol.spacing), f"{p}_gt_{name}.nii.gz", datatype="float64")


def cmd_noise_add(a):
    vol = read_nifti(a.inp)
    write_nifti(add_noise(vol, a.model, a.sigma, a.seed), a.out)


def cmd_augment_kspace(a):
    vol = read_nifti(a.inp)
    if a.spacing is not None:
        target = a.spacing
    else:
        target = [s * a.factor for s in vol.spacing]
    write_nifti(kspace_downsample(vol, target, a.reconstruct), a.out)


def cmd_denoise_mppca(a):
    vol = read_nifti(a.inp)
    cfg = PatchConfig(a.radius, a.stride, a.aggregation)
    den, rep = denoise_mppca(vol, cfg, _mask(a.mask, vol.grid), threads=a.threads)
    write_nifti(den, a.out)
    if a.sigma_out:
        write_nifti(Volume4D(rep.sigma, vol.spacing), a.sigma_out)
    if a.npars_out:
        write_nifti(Volume4D(rep.npars, vol.spacing), a.npars_out)


def _load_directions(path):
    g = np.loadtxt(path, ndmin=2)
    if g.shape[0] == 3 and g.shape[1] != 3:
        g = g.T
    if g.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns (or 3 rows) of direction components")
    return g


def cmd_select_dirs(a):
    g = _load_directions(a.inp)
    norms = np.linalg.norm(g, axis=1)
    live = np.flatnonzero(norms > 1e-6)
    sel = select_subset(g[live] / norms[live, None], a.k, a.model, seed=a.seed,
                        iters=a.iters, restarts=a.restarts, threads=a.threads)
    idx = sorted(int(live[i]) for i in sel.indices)
    text = "\n".join(str(i) for i in idx) + "\n"
    if a.out:
        with open(a.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(f"condition number {sel.condition_number:.6g}", file=sys.stderr)


def cmd_fit_dti(a):
    vol = read_nifti(a.dwi)
    scheme = read_gradients(a.bval, a.bvec)
    fit = fit_dti(vol, scheme, _mask(a.mask, vol.grid), a.method)
    p = a.out_prefix
    write_nifti(Volume4D(fit.tensor, vol.spacing), f"{p}_tensor.nii.gz", datatype="float64")
    for name, m in tensor_scalars(fit).items():
        write_nifti(Volume4D(m, vol.spacing), f"{p}_{name}.nii.gz", datatype="float64")


def cmd_fit_shm(a):
    vol = read_nifti(a.dwi)
    scheme = read_gradients(a.bval, a.bvec)
    fit = fit_shell(vol, scheme, a.shell, a.order, _mask(a.mask, vol.grid), a.lambda_lb)
    write_nifti(Volume4D(fit.coeffs, vol.spacing), f"{a.out_prefix}_sh.nii.gz",
                datatype="float64")


def _scalar(path):
    v = read_nifti(path)
    return v.data[..., 0] if v.nvols == 1 else v.data


def cmd_metric(a):
    rows = []
    if a.metric == "moments":
        raw = read_nifti(a.inp)
        den = read_nifti(a.denoised) if a.denoised else None
        vols = [int(i) for i in a.volumes.split(",")] if a.volumes else None
        if vols is not None:
            raw = raw.take(vols)
            den = den.take(vols) if den is not None else None
        labels = as_labels(read_nifti(a.labels), raw.grid) if a.labels else None
        mask = _mask(a.mask, raw.grid)
        for name, m in _region_list(labels, mask):
            mo = residual_moments(raw, den, m, a.pool)
            for key in ("mean", "variance", "skewness", "excess_kurtosis"):
                rows.append((key, name, getattr(mo, key)))
        _write_rows(rows, a.out)
        return
    if a.metric == "cov":
        s1, s2 = _scalar(a.s1), _scalar(a.s2)
        labels = as_labels(read_nifti(a.labels), s1.shape[:3])
        r1, r2 = region_means(s1, labels), region_means(s2, labels)
        for r, v in zip(r1.regions, cov_within_subject(r1, r2)):
            rows.append(("cov", str(r), v))
        rows.append(("cov", "mean", float(np.mean([v for _, _, v in rows]))))
        _write_rows(rows, a.out)
        return
    x, y = _scalar(a.a), _scalar(a.b)
    labels = as_labels(read_nifti(a.labels), x.shape[:3]) if a.labels else None
    mask = _mask(a.mask, x.shape[:3])
    for name, m in _region_list(labels, mask):
        if a.metric == "mae":
            val = mae_metric(a.name, x, y, m)
        elif a.metric == "v1-angle":
            val = v1_angular_error(x, y, m)
        else:
            jm = jsd_map(ShCoeffMap(x, _order(x)), ShCoeffMap(y, _order(y)), m)
            vals = jm[np.isfinite(jm)]
            val = float(vals.mean()) if vals.size else float("nan")
        rows.append((a.metric if a.metric != "mae" else f"mae_{a.name}", name, val))
    _write_rows(rows, a.out)


def _order(c):
    return sh_order_from_count(c.shape[-1])


def cmd_scn_build(a):
    _, regions, table = read_means_csv(a.table)
    scn = scn_build(table, regions)
    if a.out:
        write_scn_csv(a.out, scn)
    else:
        _print_scn(scn)


def _print_scn(scn):
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["region"] + list(scn.regions))
    for r, row in zip(scn.regions, scn.corr):
        w.writerow([r] + [format(float(v), ".10g") for v in row])


def cmd_scn_compare(a):
    value = scn_mae(read_scn_csv(a.a), read_scn_csv(a.b))
    _write_rows([("scn_mae", "all", value)], a.out)


def cmd_run(a):
    cfg = PipelineConfig.from_json(a.config)
    cfg.threads = a.threads
    out = run_pipeline(cfg)
    print(out)


# --- parser -------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="dmribench",
                                description="dMRI denoising and subsampling benchmark tools.")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (count; default $DMRI_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic phantoms").add_subparsers(dest="action",
                                                                            required=True)
    g = ph.add_parser("gen", help="render a phantom from a JSON spec")
    g.add_argument("--spec", required=True, help="phantom spec JSON file")
    g.add_argument("--seed", type=int, default=0, help="noise seed (integer)")
    g.add_argument("--out-prefix", required=True,
                   help="writes PREFIX_dwi.nii.gz, PREFIX.bval (s/mm^2), PREFIX.bvec (unit), "
                        "PREFIX_labels.nii.gz and ground-truth PREFIX_gt_{FA,MD,AD,RD,V1}.nii.gz "
                        "(diffusivities in mm^2/s)")
    g.set_defaults(func=cmd_phantom_gen)

    nz = sub.add_parser("noise", help="noise simulation").add_subparsers(dest="action",
                                                                        required=True)
    g = nz.add_parser("add", help="add Rician or Gaussian noise")
    g.add_argument("--in", dest="inp", required=True, help="input NIfTI")
    g.add_argument("--out", required=True, help="output NIfTI")
    g.add_argument("--model", choices=("rician", "gaussian"), default="rician",
                   help="noise model (default rician)")
    g.add_argument("--sigma", type=float, required=True,
                   help="noise standard deviation per channel (signal intensity units)")
    g.add_argument("--seed", type=int, default=0, help="random seed (integer)")
    g.set_defaults(func=cmd_noise_add)

    au = sub.add_parser("augment", help="resolution augmentation").add_subparsers(
        dest="action", required=True)
    g = au.add_parser("kspace", help="k-space low-pass to a coarser resolution")
    g.add_argument("--in", dest="inp", required=True, help="input NIfTI")
    g.add_argument("--out", required=True, help="output NIfTI (native grid)")
    grp = g.add_mutually_exclusive_group()
    grp.add_argument("--factor", type=float, default=2.0,
                     help="isotropic downsampling factor (dimensionless, >= 1; default 2)")
    grp.add_argument("--spacing", type=float, nargs=3, metavar=("X", "Y", "Z"),
                     help="target voxel spacing per axis (mm)")
    g.add_argument("--reconstruct", choices=("zerofill", "linear"), default="zerofill",
                   help="return to the native grid by zero-filling k-space or by linear "
                        "interpolation of the low-resolution image (default zerofill)")
    g.set_defaults(func=cmd_augment_kspace)

    dn = sub.add_parser("denoise", help="denoisers").add_subparsers(dest="action",
                                                                   required=True)
    g = dn.add_parser("mppca", help="Marchenko-Pastur PCA denoising")
    g.add_argument("--in", dest="inp", required=True, help="input 4D NIfTI")
    g.add_argument("--out", required=True, help="denoised 4D NIfTI")
    g.add_argument("--radius", type=int, default=2,
                   help="patch half-width (voxels; patch side 2r+1, default 2)")
    g.add_argument("--stride", type=int, default=1, help="patch centre step (voxels, default 1)")
    g.add_argument("--aggregation", choices=("overlap", "center"), default="overlap",
                   help="combine overlapping patch estimates (default overlap)")
    g.add_argument("--mask", help="mask NIfTI; voxels outside are copied unchanged")
    g.add_argument("--sigma-out", help="write the noise sigma map (intensity units)")
    g.add_argument("--npars-out", help="write the retained-component map (count)")
    g.set_defaults(func=cmd_denoise_mppca)

    g = sub.add_parser("select-dirs", help="choose a well-conditioned direction subset")
    g.add_argument("--in", dest="inp", required=True,
                   help="candidate directions: bvec file (3 rows) or N x 3 text (unit vectors; "
                        "zero rows are skipped)")
    g.add_argument("--k", type=int, required=True, help="subset size (directions)")
    g.add_argument("--model", default="dti", help="dti, sh4, sh6, ... (default dti)")
    g.add_argument("--seed", type=int, default=0, help="random seed (integer)")
    g.add_argument("--iters", type=int, default=2000, help="max swaps per restart (count)")
    g.add_argument("--restarts", type=int, default=20, help="random restarts (count)")
    g.add_argument("--out", help="write sorted zero-based row indices here (default stdout)")
    g.set_defaults(func=cmd_select_dirs)

    ft = sub.add_parser("fit", help="model fits").add_subparsers(dest="action", required=True)
    for name in ("dti", "shm"):
        g = ft.add_parser(name, help="diffusion tensor fit" if name == "dti"
                          else "per-shell spherical harmonic fit")
        g.add_argument("--dwi", required=True, help="4D DWI NIfTI")
        g.add_argument("--bval", required=True, help="FSL bval file (s/mm^2)")
        g.add_argument("--bvec", required=True, help="FSL bvec file (unit vectors)")
        g.add_argument("--mask", help="brain mask NIfTI")
        g.add_argument("--out-prefix", required=True, help="output file prefix")
        if name == "dti":
            g.add_argument("--method", choices=("ols", "wls"), default="wls",
                           help="log-linear estimator (default wls); outputs "
                                "PREFIX_{tensor,FA,MD,AD,RD,V1}.nii.gz, diffusivities in mm^2/s")
            g.set_defaults(func=cmd_fit_dti)
        else:
            g.add_argument("--order", type=int, default=4, help="even SH order (default 4)")
            g.add_argument("--shell", type=float, required=True, help="shell b-value (s/mm^2)")
            g.add_argument("--lambda", dest="lambda_lb", type=float, default=0.0,
                           help="Laplace-Beltrami penalty weight (dimensionless, default 0)")
            g.set_defaults(func=cmd_fit_shm)

    mt = sub.add_parser("metric", help="comparison metrics (CSV: metric,region,value)")
    ms = mt.add_subparsers(dest="metric", required=True)
    for name, help_ in (("mae", "mean absolute error of scalar maps (diffusivities in um^2/ms)"),
                        ("v1-angle", "mean principal-eigenvector angle (degrees)"),
                        ("jsd", "mean Jensen-Shannon distance of SH maps (base 2, in [0, 1])")):
        g = ms.add_parser(name, help=help_)
        g.add_argument("--a", required=True, help="first map NIfTI")
        g.add_argument("--b", required=True, help="second map NIfTI")
        g.add_argument("--mask", help="mask NIfTI")
        g.add_argument("--labels", help="label NIfTI; adds one row per label")
        g.add_argument("--out", help="CSV output (default stdout)")
        if name == "mae":
            g.add_argument("--name", default="FA",
                           help="map name; MD/AD/RD are reported in um^2/ms (default FA)")
        g.set_defaults(func=cmd_metric)
    g = ms.add_parser("cov", help="within-subject CoV per region (%%)")
    g.add_argument("--s1", required=True, help="session 1 scalar map NIfTI")
    g.add_argument("--s2", required=True, help="session 2 scalar map NIfTI")
    g.add_argument("--labels", required=True, help="label NIfTI (0 = background)")
    g.add_argument("--out", help="CSV output (default stdout)")
    g.set_defaults(func=cmd_metric)
    g = ms.add_parser("moments", help="pooled intensity moments (intensity units)")
    g.add_argument("--in", dest="inp", required=True, help="raw 4D NIfTI")
    g.add_argument("--denoised", help="denoised 4D NIfTI")
    g.add_argument("--pool", choices=("raw", "denoised", "residual"), default="raw",
                   help="which intensities to pool (default raw)")
    g.add_argument("--volumes", help="comma-separated zero-based volume indices to pool")
    g.add_argument("--mask", help="mask NIfTI")
    g.add_argument("--labels", help="label NIfTI; adds rows per label")
    g.add_argument("--out", help="CSV output (default stdout)")
    g.set_defaults(func=cmd_metric)

    sc = sub.add_parser("scn", help="structural covariance networks").add_subparsers(
        dest="action", required=True)
    g = sc.add_parser("build", help="Pearson SCN from a subjects x regions means table")
    g.add_argument("--table", required=True,
                   help="CSV with header 'subject,<region>,...', one row per subject")
    g.add_argument("--out", help="SCN CSV output (default stdout)")
    g.set_defaults(func=cmd_scn_build)
    g = sc.add_parser("compare", help="mean absolute difference of two SCNs (upper triangle)")
    g.add_argument("--a", required=True, help="SCN CSV")
    g.add_argument("--b", required=True, help="SCN CSV")
    g.add_argument("--out", help="CSV output (default stdout)")
    g.set_defaults(func=cmd_scn_compare)

    g = sub.add_parser("run", help="run a benchmark config (writes report.csv, manifest.json)")
    g.add_argument("--config", required=True, help="pipeline config JSON")
    g.set_defaults(func=cmd_run)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.threads = _threads(args.threads)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            args.func(args)
    except (DmriError, OSError, ValueError, ArithmeticError) as exc:
        print(f"dmribench: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
