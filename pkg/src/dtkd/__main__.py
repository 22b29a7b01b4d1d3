from dtkd.cli import main

main()
