import json
import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd
import pyarrow as pa
import pyarrow.parquet as pq

from utils.errors import DatasetError
from utils.file_utility import FileUtility

logger = logging.getLogger(__name__)

HISTORY_SCHEMA = pa.schema([
    ('stage', pa.string()),
    ('step', pa.int64()),
    ('total', pa.float64()),
    ('rgb', pa.float64()),
    ('feat', pa.float64()),
    ('depth', pa.float64()),
    ('sky', pa.float64()),
    ('gaussians', pa.int64()),
])


class CSVUtility:
    """
    Report tables: metric CSVs, JSON-lines logs, training-history parquet and
    metric-versus-axis plots.
    """

    @staticmethod
    def write_table(df, output_file):
        """
        Writes a DataFrame as CSV with a fixed float format so reruns are byte-identical.

        Args:
            df (pd.DataFrame): Table to write.
            output_file (str): Destination path.
        """
        FileUtility.ensure_directory_exists(os.path.dirname(os.path.abspath(output_file)))
        df.to_csv(output_file, index=False, float_format="%.10g")
        logger.info(f"Table written to {output_file} ({len(df)} rows)")

    @staticmethod
    def read_table(csv_path):
        if not os.path.exists(csv_path):
            raise DatasetError("table not found", csv_path)
        return pd.read_csv(csv_path)

    @staticmethod
    def append_jsonl(records, output_file):
        """Appends one JSON object per line (sorted keys)."""
        FileUtility.ensure_directory_exists(os.path.dirname(os.path.abspath(output_file)))
        with open(output_file, "a", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    @staticmethod
    def write_history(history, output_path):
        """
        Stores line-oriented training records as parquet.

        Args:
            history (list[dict]): Records with the HISTORY_SCHEMA fields.
            output_path (str): Destination .parquet file.
        """
        FileUtility.ensure_directory_exists(os.path.dirname(os.path.abspath(output_path)))
        df = pd.DataFrame(history, columns=HISTORY_SCHEMA.names)
        table = pa.Table.from_pandas(df, schema=HISTORY_SCHEMA, preserve_index=False)
        pq.write_table(
            table,
            output_path,
            compression='snappy',
            row_group_size=10000
        )
        logger.info(f"Training history written to {output_path} ({len(df)} records)")

    @staticmethod
    def read_history(path):
        return pq.read_table(path).to_pandas()

    @staticmethod
    def plot_metric_curve(table_csv, metric, out_png, axis_column="value"):
        """
        Line plot of one metric against the ablation axis.

        Args:
            table_csv (str): Ablation table written by `write_table`.
            metric (str): Column to plot on the y axis.
            out_png (str): Destination image.
            axis_column (str): Column holding the axis values.
        """
        df = CSVUtility.read_table(table_csv)
        if metric not in df.columns:
            raise DatasetError(f"metric column '{metric}' not in table", table_csv)
        axis_name = str(df["axis"].iloc[0]) if "axis" in df.columns and len(df) else axis_column
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(range(len(df)), df[metric], marker="o")
        ax.set_xticks(range(len(df)))
        ax.set_xticklabels([str(v) for v in df[axis_column]])
        ax.set_xlabel(axis_name)
        ax.set_ylabel(metric)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        FileUtility.ensure_directory_exists(os.path.dirname(os.path.abspath(out_png)))
        fig.savefig(out_png, dpi=120)
        plt.close(fig)
        logger.info(f"Plot written to {out_png}")
