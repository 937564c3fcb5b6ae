"""Property checks run by ``main.py verify``.

Every public ``check_<name>(config)`` function in a module of this package is
registered as property ``<module>.<name>`` and returns ``(passed, detail)``.
"""
