import datetime as dt

import numpy as np
import pytest

from vaxsignal.data_model import CONTROL, TARGET, Report, Stratum, StratumTable


def make_report(rid="R1", date=dt.date(2021, 6, 1), group=TARGET,
                gender="Female", age=40.0, aes=("Headache",)):
    return Report(rid, date, group, gender, age, frozenset(aes))


def two_stratum_table(counts, n_control=50, n_target=80, ae_names=None):
    counts = np.asarray(counts)
    if ae_names is None:
        ae_names = [f"AE_{i + 1:03d}" for i in range(counts.shape[0])]
    strata = [Stratum(None, None, CONTROL, n_control),
              Stratum(None, None, TARGET, n_target)]
    return StratumTable(strata, list(ae_names), counts)


@pytest.fixture
def tiny_table():
    # 3 AEs, control/target counts picked by hand
    return two_stratum_table([[3, 10], [0, 4], [7, 2]],
                             n_control=50, n_target=80)
