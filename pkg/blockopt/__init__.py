from . import errors
from . import types
from . import blockstruct
from . import separability
from . import problem
from . import sampling
from . import eso
from . import solvers
from . import analysis
from . import generators
from . import bundle

CompositeProblem = problem.CompositeProblem
SolverConfig = solvers.SolverConfig
