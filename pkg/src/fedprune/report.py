"""CSV and plaintext reporting of per-round metrics and run summaries."""

from __future__ import annotations

import csv
import dataclasses
from pathlib import Path

from .codec import VolumeLedger
from .federation import ExperimentConfig, ExperimentResult, RoundMetrics

CSV_COLUMNS = (
    "round", "phase", "accuracy", "keep_fraction",
    "bytes_up", "bytes_down", "dense_bytes_up", "dense_bytes_down",
    "attestation_s", "provisioning_s", "transmission_s",
    "ecall_s", "ocall_s", "local_training_s", "aggregation_s", "total_s",
)

PRUNING_PHASES = VolumeLedger.PRUNING_PHASES


def rows_from_result(metrics: list[RoundMetrics], ledger: VolumeLedger) -> list[dict]:
    dense_by_round = {rv.round_index: rv for rv in ledger.rounds}
    rows = []
    for m in metrics:
        rv = dense_by_round.get(m.round_index)
        rows.append({
            "round": m.round_index, "phase": m.phase,
            "accuracy": f"{m.accuracy:.6f}",
            "keep_fraction": f"{m.keep_fraction:.6f}",
            "bytes_up": m.bytes_up, "bytes_down": m.bytes_down,
            "dense_bytes_up": rv.dense_upload_bytes if rv else m.bytes_up,
            "dense_bytes_down": rv.dense_download_bytes if rv else m.bytes_down,
            "attestation_s": f"{m.attestation_s:.6f}",
            "provisioning_s": f"{m.provisioning_s:.6f}",
            "transmission_s": f"{m.transmission_s:.6f}",
            "ecall_s": f"{m.ecall_s:.6f}", "ocall_s": f"{m.ocall_s:.6f}",
            "local_training_s": f"{m.local_training_s:.6f}",
            "aggregation_s": f"{m.aggregation_s:.6f}",
            "total_s": f"{m.total_s:.6f}",
        })
    return rows


def saving_percent_from_rows(rows: list[dict]) -> float:
    """Re-aggregate the ledger saving from CSV rows (pruning phase only)."""
    actual = dense = 0
    for r in rows:
        if r["phase"] in PRUNING_PHASES:
            actual += int(r["bytes_up"]) + int(r["bytes_down"])
            dense += int(r["dense_bytes_up"]) + int(r["dense_bytes_down"])
    return 100.0 * (1.0 - actual / dense) if dense else 0.0


def write_report(result: ExperimentResult, out_dir: str | Path,
                 partial: bool = False) -> dict[str, Path]:
    """Write rounds.csv and summary.txt; the summary saving%% is recomputed
    from the CSV rows rather than copied from the ledger."""
    if not result.metrics:
        raise ValueError("no metrics to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = rows_from_result(result.metrics, result.ledger)

    csv_path = out / "rounds.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        w.writerows(rows)

    cfg = result.config
    total_elapsed = sum(m.total_s for m in result.metrics)
    actual = sum(int(r["bytes_up"]) + int(r["bytes_down"]) for r in rows
                 if r["phase"] in PRUNING_PHASES)
    dense = sum(int(r["dense_bytes_up"]) + int(r["dense_bytes_down"]) for r in rows
                if r["phase"] in PRUNING_PHASES)
    saving = saving_percent_from_rows(rows)
    if cfg.bandwidth_mbps and total_elapsed > 0:
        extra = (dense - actual) / (cfg.bandwidth_mbps * 1e6)
        speedup = f"{(total_elapsed + extra) / total_elapsed:.2f}x"
    else:
        speedup = "n/a (no bandwidth model)"

    lines = [
        "fedprune experiment summary",
        "===========================",
        f"status: {'PARTIAL (aborted run)' if partial else 'complete'}",
        "",
        "[config]",
    ]
    for f_ in dataclasses.fields(ExperimentConfig):
        lines.append(f"{f_.name} = {getattr(cfg, f_.name)}")
    lines += [
        "",
        "[summary]",
        f"rounds_completed = {len(result.metrics)}",
        f"final_accuracy = {result.final_accuracy:.4f}",
        f"compression_rate = {result.compression_rate:.2f}",
        f"pruning_phase_volume_bytes = {actual}",
        f"pruning_phase_volume_dense_equivalent_bytes = {dense}",
        f"communication_saving_percent = {saving:.2f}",
        f"total_elapsed_s = {total_elapsed:.3f}",
        f"speedup_vs_dense_baseline = {speedup}",
    ]
    summary_path = out / "summary.txt"
    summary_path.write_text("\n".join(lines) + "\n")
    return {"rounds": csv_path, "summary": summary_path}
