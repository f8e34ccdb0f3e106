import logging
import os
import sys

SUMMARY_LEVEL = 25
LOG_ENV_VARIABLE = 'DISTILLKIT_LOG'
LEVELS = {
    'DEBUG': logging.DEBUG,
    'INFO': logging.INFO,
    'SUMMARY': SUMMARY_LEVEL,
    'WARNING': logging.WARNING,
    'ERROR': logging.ERROR,
}


class LoggerConfig:
    """
    Logger configuration class. Creates the toolkit logger and has methods that add different handlers to it.

    Attributes:
        logger - the created logger.
        formatter - defines the format for the different handlers.
    """
    def __init__(self):
        self.logger = logging.getLogger('distillkit')
        self.logger.setLevel(logging.DEBUG)
        self.logger.propagate = False
        self.formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')
        # Add a new logger level
        logging.addLevelName(SUMMARY_LEVEL, "SUMMARY")
        logging.Logger.summary = _summary
        self._console_handler = None
        self._debug_handler = None
        self._file_handler = None

    def output_to_file(self, path, logging_type="Short"):
        """
        Create and add logger handler that outputs to a log file, replacing an earlier one.
        Args:
            path: file to write to (overwritten).
            logging_type: Short/Long
        Returns: the created handler
        """
        self._drop('_file_handler')
        level = SUMMARY_LEVEL if logging_type == "Short" else logging.INFO
        self._file_handler = logging.FileHandler(path, mode='w')
        self._file_handler.setLevel(level)
        self._file_handler.setFormatter(self.formatter)
        self.logger.addHandler(self._file_handler)
        return self._file_handler

    def output_console(self, level=None):
        """
        Add (or re-level) the stderr handler. Without an explicit level the DISTILLKIT_LOG
        environment variable decides, defaulting to WARNING.
        Returns: the console handler
        """
        if level is None:
            level = level_from_env()
        if self._console_handler is None:
            self._console_handler = logging.StreamHandler(sys.stderr)
            self._console_handler.setFormatter(self.formatter)
            self.logger.addHandler(self._console_handler)
        self._console_handler.setLevel(level)
        return self._console_handler

    def output_debug(self):
        """
        Add the handler that prints DEBUG records to stdout, once.
        Returns: the debug handler
        """
        if self._debug_handler is None:
            self._debug_handler = logging.StreamHandler(sys.stdout)
            self._debug_handler.setLevel(logging.DEBUG)
            self._debug_handler.addFilter(DebugFilter())
            self._debug_handler.setFormatter(self.formatter)
            self.logger.addHandler(self._debug_handler)
        return self._debug_handler

    def release_run_handlers(self):
        """
        Removes and closes the debug and file handlers of a finished command; the console handler stays.
        """
        self._drop('_debug_handler')
        self._drop('_file_handler')

    def _drop(self, attribute):
        handler = getattr(self, attribute)
        if handler is not None:
            self.logger.removeHandler(handler)
            handler.close()
            setattr(self, attribute, None)


def _summary(self, message, *args, **kws):
    """
    defines new logger level - summary.
    """
    if self.isEnabledFor(SUMMARY_LEVEL):
        self._log(SUMMARY_LEVEL, message, args, **kws)


def level_from_env(default=logging.WARNING):
    """
    Reads the verbosity from DISTILLKIT_LOG. Unknown names fall back to the default.
    """
    name = os.environ.get(LOG_ENV_VARIABLE, '').strip().upper()
    return LEVELS.get(name, default)


# Create a filter to only allow DEBUG messages to the console
class DebugFilter(logging.Filter):
    def filter(self, record):
        return record.levelno == logging.DEBUG


# Creates the sole instance of class LoggerConfig
loggerConfig = LoggerConfig()
logger = loggerConfig.logger
