from vrgadapter.cli import main

main()
