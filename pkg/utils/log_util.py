import logging

from utils.settings import settings


def setup_logging() -> logging.Logger:
    logger = logging.getLogger("arbinpaint")
    logger.setLevel(logging.DEBUG)

    file_handler = logging.FileHandler(settings.log_file)
    file_handler.name = "arbinpaint_file_log"
    file_handler.setLevel(logging.DEBUG)

    console_handler = logging.StreamHandler()
    console_handler.name = "stdout_stream_log"
    console_handler.setLevel(logging.DEBUG if settings.is_debug() else logging.INFO)

    formatter = logging.Formatter("%(levelname)s - %(asctime)s - %(lineno)d - %(module)s - %(message)s")
    file_handler.setFormatter(formatter)
    console_handler.setFormatter(formatter)

    logger.addHandler(file_handler)
    logger.addHandler(console_handler)

    return logger


logger = setup_logging()
