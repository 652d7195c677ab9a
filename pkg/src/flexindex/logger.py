import os
import logging


def get_logger(name: str) -> logging.Logger:
    """Console + file logger writing to logs/<name>.log."""
    log_dir = os.environ.get('FLEXINDEX_LOG_DIR', 'logs')
    os.makedirs(log_dir, exist_ok=True)

    logger = logging.getLogger(name)
    logger.setLevel('DEBUG')
    if logger.handlers:
        return logger

    console_handler = logging.StreamHandler()
    console_handler.setLevel('DEBUG')

    log_file_path = os.path.join(log_dir, f'{name}.log')
    file_handler = logging.FileHandler(log_file_path)
    file_handler.setLevel('DEBUG')

    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    console_handler.setFormatter(formatter)
    file_handler.setFormatter(formatter)

    logger.addHandler(console_handler)
    logger.addHandler(file_handler)
    return logger
