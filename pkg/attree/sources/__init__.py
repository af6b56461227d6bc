from . import idx
from . import patterns
from . import polytree
from . import returns
