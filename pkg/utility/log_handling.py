import logging
import os
from typing import Optional


def setup_logger(name: str, level: int = 10, directory: Optional[str] = None) -> None:
    logging.basicConfig(
        format='%(asctime)s [%(levelname)s][%(filename)s] - %(message)s', level=level)
    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    log_path: str = f'{name}.log' if directory is None else os.path.join(directory, f'{name}.log')
    if directory is not None:
        os.makedirs(directory, exist_ok=True)
    for handler in root_logger.handlers:
        if isinstance(handler, logging.FileHandler) and handler.baseFilename == os.path.abspath(log_path):
            return
    formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')
    file_handler = logging.FileHandler(log_path)
    file_handler.setFormatter(formatter)
    root_logger.addHandler(file_handler)
