"""Command-line interface: fit models on CSV data, run calibration, and
execute simulation studies.

Exit codes: 2 for configuration problems, 3 for data problems, 4 for
non-convergence. Machine output is JSON; human tables go to stdout and
report hazard ratios for a configurable multiplicative exposure increment
(HR = exp(beta * log r), CI from beta +- 1.96 SE on the same scale).
"""

from __future__ import annotations

import json
import math
import os
import sys

import click
import numpy as np

from .calibration import fit_calibration, mi_variance, read_calibration_csv
from .comparator import fit_cloglog, fit_standard
from .data_model import (
    MisclassSpec,
    read_long_csv,
    read_wide_csv,
    truncate_dataset,
    validate,
)
from .errors import (
    AuglikError,
    ConfigError,
    ConvergenceError,
    DataError,
    DegenerateLikelihoodError,
    DesignError,
)
from .estimation import FitOptions, SurveyDesign, fit
from .likelihood import pack_dataset
from .simulation import (
    SimDesign,
    bundled_design,
    bundled_design_names,
    run_study,
    write_summary_csv,
)

_Z95 = 1.96

_FIT_CONFIG_KEYS = {
    "sensitivity", "specificity", "columns", "wide", "survey", "fit_options",
    "hr_increment", "covariate_names", "truncate", "calibration",
    "compare_standard",
}
_CALIBRATION_KEYS = {"subset_csv", "m_imputations", "seed", "method", "exposure_column"}
_STANDARD_CONFIG_KEYS = {
    "columns", "wide", "survey", "hr_increment", "covariate_names",
    "sensitivity", "specificity",
}


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(body):
    try:
        body()
    except ConfigError as exc:
        _fail(2, str(exc))
    except (DataError, DesignError, DegenerateLikelihoodError) as exc:
        _fail(3, str(exc))
    except ConvergenceError as exc:
        _fail(4, str(exc))
    except AuglikError as exc:  # any remaining library error is a data problem
        _fail(3, str(exc))


def _load_config(path, allowed, required=()):
    try:
        with open(path) as handle:
            config = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    if not isinstance(config, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(config) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {sorted(unknown)}")
    missing = set(required) - set(config)
    if missing:
        raise ConfigError(f"{path}: missing required config keys: {sorted(missing)}")
    return config


def _read_dataset(data_path, config, misclass):
    reader = read_wide_csv if config.get("wide") else read_long_csv
    kwargs = {"misclass": misclass}
    if not config.get("wide") and config.get("columns") is not None:
        kwargs["column_map"] = config["columns"]
    dataset = reader(data_path, **kwargs)
    violations = validate(dataset)
    if violations:
        head = "; ".join(f"{v.subject_id}/{v.field}: {v.message}" for v in violations[:5])
        more = "" if len(violations) <= 5 else f" (and {len(violations) - 5} more)"
        raise DataError(f"{data_path}: {len(violations)} validation problems: {head}{more}")
    if config.get("truncate"):
        dataset = truncate_dataset(dataset)
    return dataset


def _covariate_names(config, p):
    names = config.get("covariate_names")
    if names is None:
        return [f"x{i + 1}" for i in range(p)]
    if len(names) != p:
        raise ConfigError(f"covariate_names has {len(names)} entries for {p} covariates")
    return [str(n) for n in names]


def _hr_entry(beta, se, increment):
    scale = math.log(increment)
    return {
        "hr": math.exp(beta * scale),
        "hr_ci": [math.exp((beta - _Z95 * se) * scale),
                  math.exp((beta + _Z95 * se) * scale)],
    }


def _hr_cell(entry):
    lo, hi = entry["hr_ci"]
    return f"{entry['hr']:.2f} ({lo:.2f}, {hi:.2f})"


def _print_table(rows, headers):
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    click.echo(line)
    click.echo("-" * len(line))
    for r in rows:
        click.echo("  ".join(c.ljust(w) for c, w in zip(r, widths)))


@click.group()
@click.version_option(package_name="auglik")
def main():
    """Augmented-likelihood estimation for error-prone periodic outcomes."""


@main.command("fit")
@click.option("--data", "data_path", required=True, type=click.Path(),
              help="Outcome CSV (long format by default).")
@click.option("--config", "config_path", required=True, type=click.Path(),
              help="JSON config; sensitivity and specificity are required.")
@click.option("--out", "out_path", default="fit.json", show_default=True,
              help="Where to write the JSON results.")
def cmd_fit(data_path, config_path, out_path):
    """Fit the augmented likelihood; optionally calibrate a mismeasured exposure."""

    def body():
        config = _load_config(config_path, _FIT_CONFIG_KEYS,
                              required=("sensitivity", "specificity"))
        misclass = MisclassSpec(float(config["sensitivity"]), float(config["specificity"]))
        dataset = _read_dataset(data_path, config, misclass)
        design = SurveyDesign.from_dataset(dataset) if config.get("survey") else None
        options = FitOptions.from_dict(config.get("fit_options") or {})
        increment = float(config.get("hr_increment", 1.2))
        if increment <= 0 or increment == 1.0:
            raise ConfigError("hr_increment must be positive and not 1")
        p = dataset.n_covariates
        if p == 0:
            raise DataError("dataset has no covariate columns")
        names = _covariate_names(config, p)

        if config.get("calibration") is not None:
            result = _fit_with_calibration(dataset, design, options, config, names)
        else:
            result = _fit_plain(dataset, design, options, config, names)

        result["hr_increment"] = increment
        for name in names:
            entry = result["estimates"][name]
            entry.update(_hr_entry(entry["beta"], entry["se"], increment))
            if "standard" in result and name in result["standard"]["estimates"]:
                std = result["standard"]["estimates"][name]
                std.update(_hr_entry(std["beta"], std["se"], increment))

        with open(out_path, "w") as handle:
            json.dump(result, handle, indent=2, sort_keys=True)
            handle.write("\n")

        headers = ["Covariate", f"HR x{increment:g} (95% CI)"]
        has_std = "standard" in result
        if has_std:
            headers += [f"Standard HR x{increment:g} (95% CI)", "RE"]
        rows = []
        for name in names:
            entry = result["estimates"][name]
            row = [name, _hr_cell(entry)]
            if has_std:
                std = result["standard"]["estimates"].get(name)
                re = result["relative_efficiency"].get(name)
                row.append("" if std is None else _hr_cell(std))
                row.append("" if re is None else f"{re:.2f}")
            rows.append(row)
        _print_table(rows, headers)
        click.echo(f"results written to {out_path}", err=True)

    _guarded(body)


def _fit_plain(dataset, design, options, config, names):
    result = fit(dataset, design=design, options=options)
    if not result.converged:
        raise ConvergenceError(
            f"fit did not converge in {result.iterations} iterations "
            f"(projected gradient {result.final_gradient_norm:.3e})"
        )
    if result.beta_cov is None:
        raise ConvergenceError("covariance unavailable: " + (result.cov_message or "unknown"))
    se = result.beta_se()
    out = {
        "estimates": {
            name: {"beta": float(b), "se": float(s)}
            for name, b, s in zip(names, result.beta, se)
        },
        "survival": [float(v) for v in result.survival],
        "loglik": result.loglik_at_optimum,
        "converged": result.converged,
        "iterations": result.iterations,
        "gradient_norm": result.final_gradient_norm,
        "cov_kind": result.cov_kind,
        "beta_covariance": [[float(v) for v in row] for row in result.beta_cov],
    }
    if config.get("compare_standard"):
        std = fit_standard(dataset, design)
        if not std.converged or std.covariance is None:
            raise ConvergenceError("standard comparator fit did not converge")
        out["standard"] = _standard_block(std, names)
        out["relative_efficiency"] = {
            name: float(std.covariance[std.coefficient_index(k), std.coefficient_index(k)]
                        / result.beta_cov[k, k])
            for k, name in enumerate(names)
        }
    return out


def _standard_block(glm, names):
    se = glm.se()
    block = {
        "estimates": {}, "converged": glm.converged, "iterations": glm.iterations,
        "cov_kind": glm.cov_kind,
    }
    if glm.has_intercept:
        block["intercept"] = {"beta": float(glm.coefficients[0]), "se": float(se[0])}
    for k, name in enumerate(names):
        i = glm.coefficient_index(k)
        block["estimates"][name] = {"beta": float(glm.coefficients[i]), "se": float(se[i])}
    return block


def _fit_with_calibration(dataset, design, options, config, names):
    cal_cfg = dict(config["calibration"])
    unknown = set(cal_cfg) - _CALIBRATION_KEYS
    if unknown:
        raise ConfigError(f"unknown calibration config keys: {sorted(unknown)}")
    if "subset_csv" not in cal_cfg:
        raise ConfigError("calibration config needs subset_csv")
    m_imp = int(cal_cfg.get("m_imputations", 25))
    seed = cal_cfg.get("seed", 0)
    method = cal_cfg.get("method", "parametric")
    exposure = int(cal_cfg.get("exposure_column", 0))
    p = dataset.n_covariates
    if not 0 <= exposure < p:
        raise ConfigError(f"exposure_column {exposure} out of range for {p} covariates")

    _ids, cal_xs, cal_xd, cal_z, _znames = read_calibration_csv(cal_cfg["subset_csv"])
    model = fit_calibration(cal_xd, cal_xs, cal_z)

    covs = np.array([s.covariates for s in dataset.subjects], dtype=float)
    x_star = covs[:, exposure]
    z_cols = np.delete(covs, exposure, axis=1)
    if (cal_z.shape[1] if cal_z is not None else 0) != z_cols.shape[1]:
        raise DataError(
            f"calibration subset has {0 if cal_z is None else cal_z.shape[1]} "
            f"z columns but the dataset has {z_cols.shape[1]} non-exposure covariates"
        )

    packed = pack_dataset(dataset)
    state = {"beta": None, "lam": None}

    def rebuild(xhat):
        return np.insert(z_cols, exposure, xhat, axis=1)

    def fit_fn(xhat):
        opts = FitOptions(beta_start=state["beta"], lam_start=state["lam"],
                          initsurv=options.initsurv, tol=options.tol,
                          max_iter=options.max_iter)
        res = fit(dataset, design=design, options=opts,
                  packed=packed.with_covariates(rebuild(xhat)))
        if res.converged and res.beta_cov is not None:
            state["beta"] = res.params.beta
            state["lam"] = res.params.lam
            return res.beta, np.diag(res.beta_cov), True
        return res.beta, np.full(len(res.beta), np.nan), False

    seed_prop, seed_std = np.random.SeedSequence(seed).spawn(2)
    mi_kwargs = {"M": m_imp, "method": method}
    if method == "bootstrap":
        mi_kwargs["calibration_rows"] = (cal_xd, cal_xs, cal_z)
    combined = mi_variance(fit_fn, model, x_star, z_cols, rng_seed=seed_prop, **mi_kwargs)

    out = {
        "estimates": {
            name: {"beta": float(b), "se": float(s)}
            for name, b, s in zip(names, combined.point_estimate, combined.se)
        },
        "m_imputations": m_imp,
        "n_failed_imputations": combined.n_failed,
        "high_failure_rate": combined.high_failure_rate,
        "calibration_model": {
            "delta": [float(d) for d in model.delta],
            "residual_variance": model.residual_variance,
            "columns": list(model.design_info),
            "n_obs": model.n_obs,
        },
        "cov_kind": "survey_sandwich" if design is not None else "hessian_inverse",
    }

    if config.get("compare_standard"):
        keep = np.array([not s.gs_missing for s in dataset.subjects])
        y_glm = np.array([s.gs_status for s in dataset.subjects if not s.gs_missing],
                         dtype=float)
        sub_design = None
        if design is not None:
            sub_design = SurveyDesign(design.strata[keep], design.clusters[keep],
                                      design.weights[keep])

        def glm_fn(xhat):
            x_glm = rebuild(xhat)[keep]
            g = fit_cloglog(y_glm, x_glm, design=sub_design)
            if g.converged and g.covariance is not None:
                return g.coefficients[1:], np.diag(g.covariance)[1:], True
            return g.coefficients[1:], np.full(x_glm.shape[1], np.nan), False

        combined_std = mi_variance(glm_fn, model, x_star, z_cols,
                                   rng_seed=seed_std, **mi_kwargs)
        out["standard"] = {
            "estimates": {
                name: {"beta": float(b), "se": float(s)}
                for name, b, s in zip(names, combined_std.point_estimate, combined_std.se)
            },
            "m_imputations": m_imp,
            "n_failed_imputations": combined_std.n_failed,
        }
        out["relative_efficiency"] = {
            name: float((combined_std.se[k] / combined.se[k]) ** 2)
            for k, name in enumerate(names)
        }
    return out


@main.command("fit-standard")
@click.option("--data", "data_path", required=True, type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_path", default="fit_standard.json", show_default=True)
def cmd_fit_standard(data_path, config_path, out_path):
    """Fit the gold-standard-only cloglog comparator."""

    def body():
        config = _load_config(config_path, _STANDARD_CONFIG_KEYS)
        misclass = None
        if "sensitivity" in config and "specificity" in config:
            misclass = MisclassSpec(float(config["sensitivity"]),
                                    float(config["specificity"]))
        dataset = _read_dataset(data_path, config, misclass)
        design = SurveyDesign.from_dataset(dataset) if config.get("survey") else None
        increment = float(config.get("hr_increment", 1.2))
        p = dataset.n_covariates
        if p == 0:
            raise DataError("dataset has no covariate columns")
        names = _covariate_names(config, p)
        glm = fit_standard(dataset, design)
        if not glm.converged:
            raise ConvergenceError(
                f"comparator did not converge in {glm.iterations} iterations"
            )
        if glm.covariance is None:
            raise ConvergenceError("covariance unavailable: " + (glm.cov_message or "unknown"))
        result = _standard_block(glm, names)
        result["hr_increment"] = increment
        for name in names:
            entry = result["estimates"][name]
            entry.update(_hr_entry(entry["beta"], entry["se"], increment))
        with open(out_path, "w") as handle:
            json.dump(result, handle, indent=2, sort_keys=True)
            handle.write("\n")
        rows = [[name, _hr_cell(result["estimates"][name])] for name in names]
        _print_table(rows, ["Covariate", f"HR x{increment:g} (95% CI)"])
        click.echo(f"results written to {out_path}", err=True)

    _guarded(body)


def _resolve_design(design_path) -> SimDesign:
    if os.path.exists(design_path):
        return SimDesign.from_json(design_path)
    stem = os.path.splitext(os.path.basename(str(design_path)))[0]
    try:
        return bundled_design(stem)
    except ConfigError:
        raise ConfigError(
            f"design file not found: {design_path} (and no bundled design named "
            f"{stem!r}; bundled: {', '.join(bundled_design_names())})"
        )


@main.command("simulate")
@click.option("--design", "design_path", required=True, type=click.Path(),
              help="SimDesign JSON file, or the name of a bundled design.")
@click.option("--out", "out_dir", default=".", show_default=True,
              type=click.Path(file_okay=False),
              help="Directory for summary.json and summary.csv.")
@click.option("--full", is_flag=True, help="Include per-replicate records in the JSON.")
def cmd_simulate(design_path, out_dir, full):
    """Run a Monte Carlo study and write its summary table."""

    def body():
        design = _resolve_design(design_path)
        os.makedirs(out_dir, exist_ok=True)

        def progress(done, total):
            if done % 10 == 0 or done == total:
                click.echo(f"replicate {done}/{total}", err=True)

        summary = run_study(design, progress=progress)
        json_path = os.path.join(out_dir, "summary.json")
        csv_path = os.path.join(out_dir, "summary.csv")
        with open(json_path, "w") as handle:
            json.dump(summary.to_dict(include_replicates=full), handle,
                      indent=2, sort_keys=True)
            handle.write("\n")
        write_summary_csv(summary, csv_path)
        with open(csv_path) as handle:
            click.echo(handle.read().rstrip())
        click.echo(f"summary written to {json_path} and {csv_path}", err=True)

    _guarded(body)


@main.command("calibrate")
@click.option("--subset", "subset_path", required=True, type=click.Path(),
              help="Calibration subset CSV (id, x_star, x_double_star, z1..zq).")
@click.option("--out", "out_path", default="calibration.json", show_default=True)
def cmd_calibrate(subset_path, out_path):
    """Fit the calibration model on a biomarker subset."""

    def body():
        _ids, xs, xd, z, znames = read_calibration_csv(subset_path)
        model = fit_calibration(xd, xs, z)
        result = {
            "delta": [float(d) for d in model.delta],
            "delta_covariance": [[float(v) for v in row] for row in model.delta_cov],
            "residual_variance": model.residual_variance,
            "columns": list(model.design_info),
            "n_obs": model.n_obs,
        }
        with open(out_path, "w") as handle:
            json.dump(result, handle, indent=2, sort_keys=True)
            handle.write("\n")
        rows = [[name, f"{d:.6f}"] for name, d in zip(model.design_info, model.delta)]
        _print_table(rows, ["Column", "Coefficient"])
        click.echo(f"residual variance: {model.residual_variance:.6f}")
        click.echo(f"results written to {out_path}", err=True)

    _guarded(body)


if __name__ == "__main__":
    main()
