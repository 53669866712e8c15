from rhythmid.cli import main

main()
