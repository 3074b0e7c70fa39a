"""Geometry kernels for the evaluator.

``_geometry`` is the compiled Cython build; ``geometry_py`` is the pure-Python
reference with the same functions.  :mod:`pcdf.geometry` picks one at import.
"""
