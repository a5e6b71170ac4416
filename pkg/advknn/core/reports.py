import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import pandas as pd

from advknn.core.exceptions import ExportError, FormatError

logger = logging.getLogger(__name__)

CONFIG_PREFIX = "# run_config: "


def write_report_csv(frame: pd.DataFrame, path: Path, run_config: Optional[Dict[str, Any]] = None) -> Path:
    """UTF-8 CSV with the run configuration echoed as a leading comment line."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.write(CONFIG_PREFIX + json.dumps(run_config or {}, sort_keys=True) + "\n")
            frame.to_csv(fh, index=False, lineterminator="\n")
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        logger.error(f"Error writing report {path}: {e}")
        raise ExportError(f"cannot write {path}: {e}") from e
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def read_report_csv(path: Path) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith(CONFIG_PREFIX):
            raise FormatError(f"{path}: missing run_config header line")
        config = json.loads(first[len(CONFIG_PREFIX):])
        frame = pd.read_csv(fh)
    return frame, config
