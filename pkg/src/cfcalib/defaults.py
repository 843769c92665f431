"""Built-in defaults for the command-line tools, in one table.

Command-line flags override a ``--config`` JSON file, which overrides these.
"""

DEFAULTS = {
    # calibration
    "dt": 0.04,  # s, 25 Hz trajectory grid
    "de_pop": 200,
    "de_iters": 50,
    "ga_pop": 500,
    "ga_iters": 1000,
    "de_F": 0.8,
    "de_CR": 0.9,
    "ga_tournament": 3,
    "ga_alpha": 0.5,
    # selection
    "v_stop": 0.1,  # m/s, full-stop threshold
    "min_stop_duration": 0.5,  # s
    "speed_limit": 50 / 3.6,  # m/s, urban limit
    # scenarios
    "scenario_dt": 0.1,  # s
    "queue_duration": 2600.0,  # s, 43 green phases
    "ring_length": 3400.0,  # m
    "ring_duration": 4200.0,  # s
    "ring_insertion": 5.0,  # s
    "ring_closure_period": 250.0,  # s
    "ring_closure_duration": 25.0,  # s
    "ring_zone_length": 50.0,  # m
    "stopgo_length": 5000.0,  # m
    "stopgo_closure": 3500.0,  # m
    "stopgo_duration": 1200.0,  # s
    # analysis
    "wave_v_c": 2.0,  # m/s, jam speed threshold
    "detector_window": 60.0,  # s
    # sensitivity
    "sobol_samples": 1024,
    "oat_grid": 11,
    "rank_threshold": 0.05,
}

JOBS_ENV = "CFCALIB_JOBS"
MANIFEST_SCHEMA = 1
