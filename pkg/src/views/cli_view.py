import sys
from typing import Any, Iterable

from tabulate import tabulate


class CLIView:
    def display_message(self, message: str):
        """Display a general message."""
        print(f"\n{message}\n")

    def display_error(self, message: str):
        """Display an error message."""
        print(f"\n❌ ERROR: {message}\n", file=sys.stderr)

    def display_success(self, message: str):
        """Display a success message."""
        print(f"\n✅ {message}\n")

    # --- Helpers to normalize row-like objects to dict ---
    def _to_mapping(self, row) -> dict:
        """
        Normalize sqlite3.Row, dataclasses and dicts to a plain dict.
        """
        if row is None:
            return {}
        if isinstance(row, dict):
            return row
        if hasattr(row, "keys"):
            return {k: row[k] for k in row.keys()}
        return dict(vars(row))

    def _table(self, rows: Iterable[Any], cols: list[str]) -> str:
        body = []
        for r in rows:
            m = self._to_mapping(r)
            body.append([self._fmt(m.get(c, "")) for c in cols])
        return tabulate(body, headers=[c.upper() for c in cols], tablefmt="simple")

    @staticmethod
    def _fmt(value) -> str:
        if isinstance(value, (list, tuple)):
            return "\n".join(str(v) for v in value) or "-"
        if isinstance(value, float):
            return f"{value:.2f}s"
        return "" if value is None else str(value)

    # --- Pipeline display ---
    def display_plan(self, job_type: str, rows: list[dict]):
        """Display the resolved stage plan for a dry run."""
        if not rows:
            print(f"\nNo stages for {job_type}\n")
            return
        print(f"\nPlan for {job_type}:")
        print(self._table(rows, ["stage", "status", "inputs", "outputs"]))
        print()

    def display_stage_report(self, report):
        """One line per finished, skipped or failed stage."""
        m = self._to_mapping(report)
        print(f"  [{m['status']}] {m['name']} ({m['duration']:.2f}s)")

    def display_run_summary(self, result):
        """Display every stage of a finished run in a table."""
        print()
        print(self._table(result.stages, ["name", "status", "duration", "outputs"]))
        print()

    def display_config(self, snapshot: str):
        """Display the resolved configuration (secrets already redacted)."""
        print(snapshot)
