import time
import logging
from contextlib import contextmanager


class Agent:
    """
    Base class for SpeechMind agents: every message is prefixed with the
    agent name and drawn in the agent's color; warnings and errors switch
    to a red background so they stand out in long transcription runs.
    """

    RED = '\033[31m'
    GREEN = '\033[32m'
    YELLOW = '\033[33m'
    BLUE = '\033[34m'
    MAGENTA = '\033[35m'
    CYAN = '\033[36m'
    WHITE = '\033[37m'

    BG_BLACK = '\033[40m'
    BG_RED = '\033[41m'
    RESET = '\033[0m'

    name: str = "Speech Agent"
    color: str = WHITE

    def log(self, message: str, level: int = logging.INFO):
        background = self.BG_RED + self.WHITE if level >= logging.WARNING else self.BG_BLACK + self.color
        logging.log(level, f"{background}[{self.name}] {message}{self.RESET}")

    def debug(self, message: str):
        self.log(message, logging.DEBUG)

    def warning(self, message: str):
        self.log(message, logging.WARNING)

    def error(self, message: str):
        self.log(message, logging.ERROR)

    @contextmanager
    def timed(self, task: str):
        """Log how long the enclosed block took once it finishes"""
        start = time.perf_counter()
        try:
            yield
        finally:
            self.log(f"{task} took {time.perf_counter() - start:.2f}s")
