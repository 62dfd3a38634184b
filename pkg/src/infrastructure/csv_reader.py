import csv
from pathlib import Path

import pandas as pd

from infrastructure.errors import ConfigurationError
from infrastructure.logger import log


class CsvReader:
    def _find_start_params(self, file_path: Path, keywords: list):
        """
        Detects the header row, the separator and the encoding of a CSV export.
        Spreadsheet tools often prepend metadata lines or switch to ';' / tab.
        """
        for enc in ['utf-8', 'utf-16', 'latin-1']:
            try:
                with open(file_path, 'r', encoding=enc) as f:
                    for i, line in enumerate(f):
                        if any(k in line for k in keywords):
                            # PRIORITY 1: Tab-separated exports
                            if '\t' in line:
                                return i, '\t', enc
                            # PRIORITY 2: Sniffer for comma/semicolon
                            try:
                                dialect = csv.Sniffer().sniff(line, delimiters=',;')
                                return i, dialect.delimiter, enc
                            except csv.Error:
                                sep = ';' if ';' in line else ','
                                return i, sep, enc
            except (UnicodeDecodeError, UnicodeError):
                continue

        return 0, ',', 'utf-8'

    def _read(self, file_path: Path, keywords: list, **read_kwargs) -> pd.DataFrame:
        file_path = Path(file_path)
        if not file_path.exists():
            raise ConfigurationError(f"CSV file not found: {file_path}", key=str(file_path))
        skip, sep, enc = self._find_start_params(file_path, keywords)
        log.debug(f"[CSV] {file_path.name}: header row {skip}, sep '{sep}', encoding {enc}")
        df = pd.read_csv(file_path, sep=sep, skiprows=skip, encoding=enc, **read_kwargs)
        df.columns = df.columns.str.strip()
        return df

    def read_features(self, file_path: Path) -> pd.DataFrame:
        """Feature table; `sample_id` is the first column and becomes the index."""
        df = self._read(file_path, ["sample_id"], float_precision="round_trip")
        if df.columns[0] != "sample_id":
            raise ConfigurationError(f"{Path(file_path).name}: first column must be 'sample_id'", key="features_csv")
        return df.set_index("sample_id")

    def read_labels(self, file_path: Path) -> pd.DataFrame:
        """Label table: one integer `label` column or multi-hot `label_*` columns."""
        df = self._read(file_path, ["sample_id"])
        if "sample_id" not in df.columns:
            raise ConfigurationError(f"{Path(file_path).name}: missing 'sample_id' column", key="labels_csv")
        label_cols = [c for c in df.columns if c == "label" or c.startswith("label_")]
        if not label_cols:
            raise ConfigurationError(f"{Path(file_path).name}: no 'label' column found", key="labels_csv")
        return df.set_index("sample_id")[label_cols]

    def read_topk(self, file_path: Path) -> pd.DataFrame:
        """Reads a top-k table written by the report module."""
        return self._read(file_path, ["Variant"], float_precision="round_trip")
