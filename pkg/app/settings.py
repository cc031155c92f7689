import os
import pathlib

from dotenv import load_dotenv

load_dotenv()

RESULTS_DIR = pathlib.Path(os.getenv("RBMELT_RESULTS_DIR", "results")).resolve()
LOG_LEVEL = os.getenv("RBMELT_LOG_LEVEL", "INFO").upper()
WORKERS = int(os.getenv("RBMELT_WORKERS", "1"))
