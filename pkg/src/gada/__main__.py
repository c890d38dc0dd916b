"""``python -m gada`` mirrors the installed console script."""

from gada.bench import main

main()
