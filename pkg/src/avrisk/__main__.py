from avrisk.cli import main

main()
