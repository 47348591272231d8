import os
from dotenv import load_dotenv

load_dotenv()

WORKERS = int(os.getenv("DIFFINF_WORKERS", "1"))
OUT_DIR = os.getenv("DIFFINF_OUT_DIR", "artifacts/run")
LOG_LEVEL = os.getenv("DIFFINF_LOG_LEVEL", "INFO")
