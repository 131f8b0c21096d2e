schema_version = "1.0"

comparison_columns = ['method', 'bias', 'std', 'n_failures', 'p_eff_over_n', 'min_rel_ess', 'khat_max']

sweep_columns = ['multiplier', 'nu', 'p_eff_over_n', 'method', 'bias', 'std', 'n_failures', 'status']

fit_summary = """
Model: {likelihood} likelihood, {method} approximation, n={n}, d={d}
Hyperparameters ({handling}, {n_samples} sample(s)): {hyperparameters}
Log marginal likelihood: {log_marginal:.6f}
Summary written to {path}
"""

loo_summary_header = """
LOO results for {n} points against {reference} ({n_methods} method(s)):
"""

loo_summary_row = "  {method:<24} sum lpd {sum_lpd:>12.4f}  bias {bias:>10.4f}  std {std:>8.4f}  failures {n_failures}"

sweep_summary = """
Sweep over {n_points} {kind} value(s), {n_rows} rows written to {path}
"""
