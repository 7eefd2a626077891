"""Multi-view depth estimation by iterative matching along epipolar lines.

Depth is never searched over a list of depth hypotheses.  Each reference
pixel keeps one scalar per source view, its displacement along the
epipolar line, which is refined by 1-D matching and turned back into depth
in closed form.  The declared depth range therefore only shapes the random
initialisation.
"""

__version__ = "0.1.0"
