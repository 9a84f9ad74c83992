from hypothesis import HealthCheck, settings

# CPU CI boxes are slow enough that per-example deadlines flake; correctness
# is what the properties check, not speed.
settings.register_profile(
    "repose", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repose")
