"""Step 06: 実験ハーネス - テストモジュール

このステップでは、設定の読み込み、手法の実行、集計、出力ファイル、
コマンドラインを確認します。
"""
