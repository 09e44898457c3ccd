"""
Entry point for running latentmatch as a module
"""

from .main import main

if __name__ == "__main__":
    main()
