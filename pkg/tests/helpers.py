"""Synthetic raw-log builders shared by the ETL and acceptance tests."""

import numpy as np


def pulse_values(
    n_pass: int,
    rate_hz: int = 100,
    period_s: float = 10.0,
    width_s: float = 2.0,
    amplitude: float = 1.0,
    baseline: float = 0.0,
    pad_s: float = 20.0,
):
    """Noiseless half-sine load passes with flat lead-in/lead-out."""
    duration = n_pass * period_s
    t = np.arange(0.0, duration + 2 * pad_s, 1.0 / rate_hz)
    tp = t - pad_s
    x = np.mod(tp, period_s)
    in_train = (tp >= 0) & (tp < duration)
    y = baseline + amplitude * np.where(
        in_train & (x < width_s),
        np.sin(np.pi * np.minimum(x, width_s) / width_s),
        0.0,
    )
    return t, y


def raw_text(header: dict, t, columns) -> str:
    """Render a canonical raw log (single- or multi-channel)."""
    lines = [f"# {key}: {value}" for key, value in header.items()]
    cols = [np.asarray(c) for c in columns]
    for i, ti in enumerate(t):
        row = ",".join(f"{c[i]:.6f}" for c in cols)
        lines.append(f"{ti:.3f},{row}")
    return "\n".join(lines) + "\n"


def asg_raw_text(
    n_pass: int,
    rate_hz: int = 100,
    cal_coeff: float = 0.849,
    rated_output: float = 5890.0,
    gage: str = "7",
    placement: str = "36",
    **pulse_kw,
) -> str:
    t, y = pulse_values(n_pass, rate_hz=rate_hz, **pulse_kw)
    header = {
        "kind": "ASG",
        "unit": "microstrain",
        "gage": gage,
        "placement": placement,
        "cal_coeff": cal_coeff,
        "rated_output": rated_output,
    }
    return raw_text(header, t, [y])


def tc_raw_text(rate_hz: int = 10, periods: int = 3, period_s: float = 10.0) -> str:
    """Thermocouple-style sinusoid with exactly `periods` maxima and minima."""
    t = np.arange(0.0, periods * period_s, 1.0 / rate_hz)
    y = 70.0 + 5.0 * np.sin(2.0 * np.pi * t / period_s)
    header = {"kind": "TC", "unit": "degF"}
    return raw_text(header, t, [y])


def laser_raw_text(n_samples: int = 4000, start_time: str = "10:57:16.47") -> str:
    t = np.arange(n_samples) * 0.025
    reading = 250.88 - 0.0005 * np.arange(n_samples)
    beam = np.where(np.arange(n_samples) == 0, 0.0, 20.0)
    header = {"kind": "LASER", "unit": "mm", "start_time": start_time}
    return raw_text(header, t, [reading, beam])
