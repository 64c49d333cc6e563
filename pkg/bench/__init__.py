"""Desk-scale reproductions of the FTL experiments: workloads, aging, presets and reports."""
