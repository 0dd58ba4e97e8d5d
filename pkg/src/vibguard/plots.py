"""Report tables and plot data. Every CSV carries the config hash; figures are rendered next to their data."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DEFENSE_FIELDS = ["defense", "mcd", "wer", "ddr", "pesq_proxy_lsd_db", "snr_db", "config_hash"]


def write_csv(path: str | Path, rows: list[dict], fields: list[str], config_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields + (["config_hash"] if "config_hash" not in fields else []))
        w.writeheader()
        for r in rows:
            w.writerow({**{k: r.get(k, "") for k in fields}, "config_hash": config_hash})
    return path


def write_defense_table(path: str | Path, table: list[dict], config_hash: str) -> Path:
    """Defense x {MCD, WER, DDR, PESQ-proxy}. An empty table still gets its header."""
    rows = [{**r, "pesq_proxy_lsd_db": r.get("lsd_db", "")} for r in table]
    return write_csv(path, rows, DEFENSE_FIELDS[:-1], config_hash)


def _save(fig, path: Path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})  # no version stamp, so reruns give identical bytes
    plt.close(fig)


def write_rho_sweep(out: str | Path, sweep: list[dict], config_hash: str) -> None:
    out = Path(out)
    write_csv(out / "rho_sweep.csv", sweep, ["rho_db", "mcd", "lsd_db"], config_hash)
    if not sweep:
        return
    rho = [r["rho_db"] for r in sweep]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(rho, [r["mcd"] for r in sweep], "o-", label="MCD (eavesdropped)")
    ax.plot(rho, [r["lsd_db"] for r in sweep], "s--", label="LSD dB (played)")
    ax.set_xlabel("LFAP SNR rho (dB)")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, out / "rho_sweep.png")


def write_robustness(path: str | Path, rows: list[dict], config_hash: str) -> Path:
    return write_csv(path, rows, ["transform", "mcd", "line", "passed"], config_hash)


def write_loss_curves(out: str | Path, name: str, curves: list[dict], config_hash: str) -> None:
    out = Path(out)
    if not curves:
        write_csv(out / f"{name}_curves.csv", [], ["step"], config_hash)
        return
    fields = list(curves[0])
    write_csv(out / f"{name}_curves.csv", curves, fields, config_hash)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in curves]
    for k in fields[1:]:
        ax.plot(steps, [r[k] for r in curves], label=k, lw=1)
    ax.set_xlabel("step")
    ax.set_title(f"{name} losses")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    _save(fig, out / f"{name}_curves.png")


def write_frequency_responses(out: str | Path, ears, config_hash: str, n_freqs: int = 64) -> None:
    """Channel gain curves for every scenario in the grid."""
    out = Path(out)
    rate = ears.sensor_rate
    freqs = np.geomspace(20.0, rate / 2, n_freqs)
    rows = []
    for si, chan in enumerate(ears.channels):
        for f, g in zip(freqs, chan.gain_db(freqs)):
            rows.append({"scenario": si, "freq_hz": float(f), "gain_db": float(g),
                         "noise_floor_db": chan.noise_floor_db})
    write_csv(out / "frequency_response.csv", rows, ["scenario", "freq_hz", "gain_db", "noise_floor_db"], config_hash)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for chan in ears.channels:
        ax.semilogx(freqs, chan.gain_db(freqs), color="tab:blue", alpha=0.15, lw=1)
    floor = ears.channels[0].noise_floor_db
    if math.isfinite(floor):
        ax.axhline(floor, color="k", ls=":", label="noise floor")
        ax.legend()
    ax.set_xlabel("Hz")
    ax.set_ylabel("gain (dB)")
    ax.grid(alpha=0.3, which="both")
    _save(fig, out / "frequency_response.png")
