"""Source-table layouts, the model feature list and herd-life classes."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class TableSchema:
    kind: str
    title: str
    columns: tuple[str, ...]
    id_col: str
    herd_col: str
    event_date: str | None = None          # column that places a row on a cow's timeline
    date_cols: tuple[str, ...] = ()
    numeric_cols: tuple[str, ...] = ()

    @property
    def filename(self) -> str:
        return f"{self.kind}.csv"


DS102 = TableSchema(
    "ds102", "Cow Pedigree Record",
    ("National Cow ID", "National Herd ID", "Within-Herd Cow ID", "Birth Date", "Sire National ID",
     "Dam National ID", "Animal Termination Code", "Animal Termination Date"),
    id_col="National Cow ID", herd_col="National Herd ID",
    date_cols=("Birth Date", "Animal Termination Date"),
)

DS103 = TableSchema(
    "ds103", "Lactation Record",
    ("Milk Yield", "Fat Yield", "Total Solids 305", "Milk 305", "Fat 305", "Protein 305", "Protein Yield",
     "Lactose Yield", "Solids Yield", "PI Milk", "PI Fat", "PI Protein", "Custom PI", "National Cow ID",
     "National Herd ID", "Within-Herd Cow ID", "Calving Date", "Calving Code", "Parity", "Termination Date",
     "Termination Code", "Num PI TEST", "Lactose 305"),
    id_col="National Cow ID", herd_col="National Herd ID", event_date="Calving Date",
    date_cols=("Calving Date", "Termination Date"),
    numeric_cols=("Milk Yield", "Fat Yield", "Total Solids 305", "Milk 305", "Fat 305", "Protein 305",
                  "Protein Yield", "Lactose Yield", "Solids Yield", "PI Milk", "PI Fat", "PI Protein",
                  "Custom PI", "Parity", "Num PI TEST", "Lactose 305"),
)

DS104 = TableSchema(
    "ds104", "Test Day Record",
    ("National Cow ID", "National Herd ID", "Within-Herd Cow ID", "Test Date", "Fat Percentage",
     "Protein Percentage", "Lactose Percentage", "Somatic Cell Count", "Milk Yield", "Calving Date"),
    id_col="National Cow ID", herd_col="National Herd ID", event_date="Test Date",
    date_cols=("Test Date", "Calving Date"),
    numeric_cols=("Fat Percentage", "Protein Percentage", "Lactose Percentage", "Somatic Cell Count",
                  "Milk Yield"),
)

DS108 = TableSchema(
    "ds108", "Pregnancy Test Record",
    ("National Cow Id", "National Herd Id", "Within-Herd Cow Id", "Date", "Code", "Result",
     "Bull National Id", "Technician Code"),
    id_col="National Cow Id", herd_col="National Herd Id", event_date="Date",
    date_cols=("Date",), numeric_cols=("Result",),
)

DS112 = TableSchema(
    "ds112", "Calving Ease Record",
    ("National Cow ID", "National Herd ID", "Within-Herd Cow ID", "Calving Date", "Parity",
     "Last Mating Date", "Litter Size", "Calving Ease", "Sex Of Calf", "Fate Of Calf", "Size Of Calf"),
    id_col="National Cow ID", herd_col="National Herd ID", event_date="Calving Date",
    date_cols=("Calving Date", "Last Mating Date"),
    numeric_cols=("Parity", "Litter Size", "Calving Ease"),
)

DS116 = TableSchema(
    "ds116", "Herd Health Record",
    ("National Cow ID", "National Herd ID", "Date", "Health Event Code", "Health Treatment Code",
     "Anatomical Position"),
    id_col="National Cow ID", herd_col="National Herd ID", event_date="Date",
    date_cols=("Date",),
)

DS202 = TableSchema(
    "ds202", "ABV",
    ("National ID", "National Herd ID", "Within-Herd Cow ID", "Breed Of Cow", "Date Of Birth",
     "Mammary System", "Health Weighted Index", "ABV Mastitis Resistance", "Reliability Mastitis Resistance"),
    id_col="National ID", herd_col="National Herd ID",
    date_cols=("Date Of Birth",),
    numeric_cols=("Mammary System", "Health Weighted Index", "ABV Mastitis Resistance",
                  "Reliability Mastitis Resistance"),
)

TABLES: dict[str, TableSchema] = {t.kind: t for t in (DS102, DS103, DS104, DS108, DS112, DS116, DS202)}

# same-date merge priority: test-day, lactation, pregnancy, calving, health
EVENT_PRIORITY = ("ds104", "ds103", "ds108", "ds112", "ds116")

FEATURES = (
    "current_life_days", "lactation", "milk_305", "lactose_yield", "pi_fat", "num_pi_tests", "milk_fat",
    "lactose_percentage", "scc", "days_pregnant", "mammary_system", "hwi", "abv_mastitis_resistance",
    "tested_flag", "bred_flag", "treated_flag",
)
FLAGS = ("tested_flag", "bred_flag", "treated_flag")
CONTINUOUS = tuple(f for f in FEATURES if f not in FLAGS)
N_FEATURES = len(FEATURES)

# raw column feeding each carried feature
FEATURE_SOURCES = {
    "lactation": ("ds103", "Parity"),
    "milk_305": ("ds103", "Milk 305"),
    "lactose_yield": ("ds103", "Lactose Yield"),
    "pi_fat": ("ds103", "PI Fat"),
    "num_pi_tests": ("ds103", "Num PI TEST"),
    "milk_fat": ("ds104", "Fat Percentage"),
    "lactose_percentage": ("ds104", "Lactose Percentage"),
    "scc": ("ds104", "Somatic Cell Count"),
    "days_pregnant": ("ds108", "Result"),
    "mammary_system": ("ds202", "Mammary System"),
    "hwi": ("ds202", "Health Weighted Index"),
    "abv_mastitis_resistance": ("ds202", "ABV Mastitis Resistance"),
}


@dataclass(frozen=True)
class TraitStats:
    mean: float
    sd: float
    lo: float
    hi: float


# Published per-trait statistics. Milk 305 and SCC maxima are printed split
# across two lines in the source table; read here as 17910 and 13125.
TABLE_IV: dict[str, TraitStats] = {
    "lactation": TraitStats(3, 1.8, 0, 12),
    "milk_yield": TraitStats(23.4, 8.6, 0.1, 77.2),
    "milk_fat": TraitStats(4.2, 0.8, 0, 11.5),
    "lactose_percentage": TraitStats(4.6, 1.2, 0, 6.5),
    "milk_305": TraitStats(6847, 2241, 0, 17910),
    "lactose_yield": TraitStats(331, 237, 0, 2966),
    "pi_fat": TraitStats(95, 25, 0, 168),
    "num_pi_tests": TraitStats(7.5, 4, 0, 39),
    "scc": TraitStats(162.5, 437.6, 1, 13125),
    "hwi": TraitStats(35.3, 93, -342, 454),
    "mammary_system": TraitStats(94, 6, 68, 114),
    "abv_mastitis_resistance": TraitStats(101, 2.7, 87, 110),
    "hl": TraitStats(2617, 898, 101, 4993),
}

# No published statistics; the generator's choice, also used as the cleaning bound.
DAYS_PREGNANT = TraitStats(60.0, 70.0, 0, 300)

HL_MIN_DAYS = 100
HL_MAX_DAYS = 5000

CLASS_NAMES = ("low", "medium", "high")
T_LOW = 2158
T_HIGH = 2997


def hl_to_class(days: float, thresholds: tuple[float, float] = (T_LOW, T_HIGH)) -> int:
    """0 = low (< t_low), 1 = medium (t_low..t_high inclusive), 2 = high (> t_high)."""
    if days < 0:
        raise ValueError(f"herd life cannot be negative: {days}")
    t_low, t_high = thresholds
    if days < t_low:
        return 0
    if days > t_high:
        return 2
    return 1


def feature_bounds(name: str) -> tuple[float, float] | None:
    if name == "days_pregnant":
        return DAYS_PREGNANT.lo, DAYS_PREGNANT.hi
    if name in TABLE_IV:
        s = TABLE_IV[name]
        return s.lo, s.hi
    return None
