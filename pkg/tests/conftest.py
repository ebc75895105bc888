import csv
from pathlib import Path

import numpy as np
import pytest

from herdlife.schemas import TABLES


def write_tables(directory, tables: dict) -> Path:
    """Write ``{kind: [row dicts]}`` as source CSVs; absent columns are blank."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for kind, rows in tables.items():
        cols = TABLES[kind].columns
        with open(directory / TABLES[kind].filename, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                unknown = set(r) - set(cols)
                assert not unknown, unknown
                w.writerow([r.get(c, "") for c in cols])
    return directory


def ped(cow, farm, birth, cull=""):
    return {"National Cow ID": cow, "National Herd ID": farm, "Birth Date": birth, "Animal Termination Date": cull}


def td_row(cow, farm, date, fat="4.0", lact="4.6", scc="150"):
    return {"National Cow ID": cow, "National Herd ID": farm, "Test Date": date, "Fat Percentage": fat,
            "Lactose Percentage": lact, "Somatic Cell Count": scc}


def lactation(cow, farm, date, parity, milk="6800", lyield="330", pifat="95", ntests="7"):
    return {"National Cow ID": cow, "National Herd ID": farm, "Calving Date": date, "Parity": parity,
            "Milk 305": milk, "Lactose Yield": lyield, "PI Fat": pifat, "Num PI TEST": ntests}


def calving(cow, farm, date, parity):
    return {"National Cow ID": cow, "National Herd ID": farm, "Calving Date": date, "Parity": parity}


def preg(cow, farm, date, result):
    return {"National Cow Id": cow, "National Herd Id": farm, "Date": date, "Result": result}


def health(cow, farm, date):
    return {"National Cow ID": cow, "National Herd ID": farm, "Date": date, "Health Event Code": "M1"}


def abv(cow, farm, mammary="94", hwi="35", mast="101"):
    return {"National ID": cow, "National Herd ID": farm, "Mammary System": mammary,
            "Health Weighted Index": hwi, "ABV Mastitis Resistance": mast}


def five_cow_tables() -> dict:
    """C1 five merged dates, C2 pedigree only, C3 four, C4 herd life 50, C5 herd life 101."""
    return {
        "ds102": [ped("C1", "H1", "2010-01-01", "2016-01-01"), ped("C2", "H1", "2010-01-01", "2015-01-01"),
                  ped("C3", "H2", "2011-01-01", "2017-01-01"), ped("C4", "H2", "2011-01-01", "2011-02-20"),
                  ped("C5", "H2", "2011-01-01", "2011-04-12")],
        "ds103": [lactation("C1", "H1", "2012-01-10", "1")],
        "ds104": [td_row("C1", "H1", "2012-02-10"), td_row("C1", "H1", "2012-03-10", fat="4.4"),
                  td_row("C1", "H1", "2012-04-10"),
                  td_row("C3", "H2", "2013-01-05"), td_row("C3", "H2", "2013-02-05"),
                  td_row("C3", "H2", "2013-03-05"),
                  td_row("C4", "H2", "2011-02-01"),
                  td_row("C5", "H2", "2011-02-20", scc="-5"),
                  td_row("X9", "H9", "2012-01-01")],
        "ds108": [preg("C1", "H1", "2012-05-01", "40")],
        "ds112": [calving("C1", "H1", "2012-01-10", "1")],
        "ds116": [health("C1", "H1", "2012-03-10"), health("C3", "H2", "2013-04-01")],
        "ds202": [abv("C1", "H1"), abv("C3", "H2")],
    }


@pytest.fixture
def five_cow_dir(tmp_path):
    return write_tables(tmp_path / "data", five_cow_tables())


@pytest.fixture(scope="session")
def small_synth_dir(tmp_path_factory):
    """300 synthetic cows over 3 farms, written once per session."""
    from herdlife import synth

    out = tmp_path_factory.mktemp("synth300")
    synth.generate(synth.default_config(n_cows=300, n_farms=3, seed=11)).write(out)
    return out


def random_histories(n, rng, n_records=(1, 12), farms=("F1", "F2")):
    """Histories with random standardised features, for model-level tests."""
    from herdlife.ingestion import CowHistory, Record
    from herdlife.schemas import N_FEATURES, hl_to_class

    out = []
    for i in range(n):
        k = int(rng.integers(n_records[0], n_records[1] + 1))
        days = np.sort(rng.choice(4000, size=k, replace=False))
        hl = int(rng.integers(200, 4900))
        h = CowHistory(f"R{i:04d}", farms[i % len(farms)], 0, hl, hl_days=hl, hl_class=hl_to_class(hl))
        h.records = [Record(int(d), ("ds104",)) for d in days]
        h.raw_features = rng.normal(size=(k, N_FEATURES))
        h.features = h.raw_features.copy()
        out.append(h)
    return out


# acceptance results, one line per criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
