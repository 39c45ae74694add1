from harqage.cli import run

run()
