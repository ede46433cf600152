"""Deterministic CSV and JSON artifact helpers."""

from __future__ import annotations

import gzip
import hashlib
import json
from contextlib import contextmanager
from pathlib import Path

import pandas as pd
import pyarrow as pa
import pyarrow.csv as pacsv

STRING_COLUMNS = ("device_id", "month", "hex_id", "poi_id", "region_id", "home_hex", "station_id", "arm",
                  "outcome", "category")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@contextmanager
def open_output(path):
    """Binary writer; ``.gz`` paths get gzip with no name and mtime 0 so
    equal content gives equal bytes wherever it is written."""
    if str(path).endswith(".gz"):
        with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw,
                                                    compresslevel=1, mtime=0) as fh:
            yield fh
    else:
        with open(path, "wb") as fh:
            yield fh


def write_csv(df: pd.DataFrame, path) -> int:
    """Headered CSV; floats in shortest round-trip form, missing values empty."""
    table = pa.Table.from_pandas(df, preserve_index=False)
    header = (",".join(map(str, df.columns)) + "\n").encode()
    try:
        body = _csv_body(table, "none")
    except pa.ArrowInvalid:
        # some value holds a comma or quote
        body = _csv_body(table, "needed")
    with open_output(path) as fh:
        fh.write(header)
        fh.write(body)
    return len(df)


def _csv_body(table, quoting) -> bytes:
    sink = pa.BufferOutputStream()
    pacsv.write_csv(table, sink, pacsv.WriteOptions(include_header=False, quoting_style=quoting))
    return sink.getvalue().to_pybytes()


def read_csv(path) -> pd.DataFrame:
    """Read an artifact written by :func:`write_csv`; id columns stay strings."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        head = fh.readline().decode().rstrip("\n").split(",")
    types = {c: pa.string() for c in head if c in STRING_COLUMNS}
    table = pacsv.read_csv(path, convert_options=pacsv.ConvertOptions(
        column_types=types, strings_can_be_null=False))
    df = table.to_pandas()
    for c in types:
        df[c] = df[c].astype(object)
    return df


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")
