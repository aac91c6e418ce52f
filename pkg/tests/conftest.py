"""Shared fixtures: a fictitious single-patient event timeline whose
session structure is known by construction (two original supine
stretches, two prone episodes, one qualifying re-measurement bundle in
each supine stretch)."""

import csv
import io
from datetime import datetime, timedelta

import pytest

T0 = datetime(2024, 1, 1)


def stamp(hours, minutes=0):
    return (T0 + timedelta(hours=hours, minutes=minutes)).strftime("%Y-%m-%dT%H:%M:%SZ")


def events_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(("patient_id", "timestamp", "kind", "name", "value"))
    w.writerows(rows)
    return buf.getvalue()


def timeline_rows(patient="p1"):
    """Events for the known six-session timeline.

    Sessions (hours from T0): supine [0, 30], prone [30, 46],
    supine [46, 80], prone [80, 96]; re-measurement bundles at +10h and
    +56h each spawn an artificial supine session ending with its parent.
    """
    rows = []

    def meas(h, name, v, m=0):
        rows.append((patient, stamp(h, m), "measurement", name, v))

    for name, v in [("pao2", 55), ("fio2", 80), ("peep", 10), ("sofa", 9),
                    ("age", 61), ("bmi", 27), ("male_sex", 1)]:
        meas(0, name, v)
    meas(0, "pf_ratio", 68.75)
    meas(10, "pao2", 60)
    meas(9, "peep", 12, 30)
    meas(10, "fio2", 75)
    meas(10, "pf_ratio", 80)
    meas(4, "pf_ratio", 90)
    meas(13, "pf_ratio", 95)
    rows.append((patient, stamp(30), "position", "prone", ""))
    meas(30, "pao2", 70, 15)
    meas(30, "fio2", 60, 15)
    meas(30, "peep", 10, 15)
    meas(30, "pf_ratio", 116, 15)
    meas(34, "pf_ratio", 140)
    rows.append((patient, stamp(46), "position", "supine", ""))
    meas(46, "pao2", 58)
    meas(46, "fio2", 70)
    meas(46, "peep", 8)
    meas(46, "pf_ratio", 82)
    meas(50, "pf_ratio", 100)
    meas(56, "pao2", 62)
    meas(55, "peep", 9, 30)
    meas(56, "fio2", 65)
    meas(56, "pf_ratio", 95)
    meas(60, "pf_ratio", 105)
    rows.append((patient, stamp(80), "position", "prone", ""))
    meas(80, "pao2", 66, 15)
    meas(80, "fio2", 62, 15)
    meas(80, "peep", 11, 15)
    meas(80, "pf_ratio", 106, 15)
    meas(84, "pf_ratio", 150)
    meas(96, "heart_rate", 88)
    return rows


@pytest.fixture
def timeline_text():
    return events_csv(timeline_rows())


@pytest.fixture
def timeline_file(tmp_path):
    p = tmp_path / "events.csv"
    p.write_text(events_csv(timeline_rows()))
    return p
