"""Top-level module for dashattn."""
from .version import version as __version__

__license__ = "MIT"

# Default configuration files and environment variables
DASHATTNRC_VAR = "DASHATTNRC"
DASHATTN_FLAGS_VAR = "DASHATTN_FLAGS"
DASHATTNRC_FILE = "~/.dashattnrc"

# Get config
from dashattn.configdefaults import config

# Import all submodules
from . import exceptions
from . import numkit
from . import input_output as io
from . import entmax
from . import summarize
from . import route
from . import attend
from . import grad
from . import diagnostics
from . import bench
from . import utils
from . import algorithms
from . import run
from .grad import gradops_registry
from .run import process
